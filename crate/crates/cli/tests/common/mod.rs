#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use pan_core::dataset::idx::{encode_idx, Glyph, GLYPH_LEN, GLYPH_SIDE};
use sha2::{Digest, Sha256};

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn pan_lab(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_pan-lab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("PAN_LAB_THREADS")
        .output()
        .expect("pan-lab runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Writes a blocky ten-class glyph set in IDX format.
pub fn fixture_mnist(dir: &Path) -> PathBuf {
    let glyphs: Vec<Glyph> = (0..60)
        .map(|i| {
            let label = (i % 10) as u8;
            let mut px = Box::new([0u8; GLYPH_LEN]);
            for y in 5..23 {
                for x in 8..20 {
                    if (x * (label as usize + 1) + y) % 4 != 0 {
                        px[y * GLYPH_SIDE + x] = 240;
                    }
                }
            }
            Glyph { pixels: px, label }
        })
        .collect();
    let (images, labels) = encode_idx(&glyphs);
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join("train-images-idx3-ubyte"), images).unwrap();
    std::fs::write(dir.join("train-labels-idx1-ubyte"), labels).unwrap();
    dir.to_path_buf()
}

pub fn write(path: &Path, text: &str) -> PathBuf {
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}

pub const SMALL_GEN: &str = "variant = MDIST\ncanvas = 32\ntrain_count = 24\nval_count = 8\ntest_count = 8\n\
digits_min = 1\ndigits_max = 2\nscale_max = 1.0\ndistractor_patches = 10\nseed = 7\n";

pub const SMALL_TRAIN: &str = "model = PAN_CTX\ninput_size = 32\nchannels = 4\nhidden_dim = 4\nepochs = 2\nbatch_size = 8\nseed = 3\n";

pub fn sha256(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Regular files of `dir` except the run manifest, which records wall time.
pub fn outputs(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "manifest.json")
        .collect();
    files.sort();
    files
}

/// Names of files whose hashes differ between two output directories.
pub fn differing(a: &Path, b: &Path) -> Vec<String> {
    let (fa, fb) = (outputs(a), outputs(b));
    let names = |fs: &[PathBuf]| fs.iter().map(|f| f.file_name().unwrap().to_owned()).collect::<Vec<_>>();
    if names(&fa) != names(&fb) {
        return vec![format!("file sets differ: {:?} vs {:?}", names(&fa), names(&fb))];
    }
    fa.iter()
        .zip(&fb)
        .filter(|(x, y)| sha256(x) != sha256(y))
        .map(|(x, _)| x.file_name().unwrap().to_string_lossy().into_owned())
        .collect()
}
