//! Process-level tuning for long training runs.

/// Keeps freed heap memory mapped so the large per-step buffers of a tape are
/// recycled instead of being faulted in again on every allocation. Only has
/// an effect with glibc; safe to call more than once.
pub fn retain_heap() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        const M_TRIM_THRESHOLD: libc::c_int = -1;
        const M_MMAP_THRESHOLD: libc::c_int = -3;
        // SAFETY: mallopt only adjusts allocator tunables.
        unsafe {
            libc::mallopt(M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(M_TRIM_THRESHOLD, 1 << 30);
        }
    }
}
