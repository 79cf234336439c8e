#![allow(dead_code)]

use std::path::PathBuf;

/// `EENET_MNIST_DIR`, else `data/mnist` at the workspace root.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("EENET_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub fn mnist_available() -> bool {
    let dir = mnist_dir();
    [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ]
    .iter()
    .all(|f| dir.join(f).is_file())
}

/// Every strictly increasing choice of `n` boundaries out of `m`, in
/// lexicographic order.
fn subsets(m: usize, n: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, m: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for b in start..=m - left {
            cur.push(b);
            go(b + 1, m, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, m, n, &mut Vec::new(), &mut out);
    out
}

/// Exhaustive search for the subset minimizing total `|target - realized|`;
/// the first subset in lexicographic order wins ties.
pub fn brute_force_snap(targets: &[f64], fractions: &[f64]) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for s in subsets(fractions.len(), targets.len()) {
        let cost: f64 = s
            .iter()
            .zip(targets)
            .map(|(&b, t)| (t - fractions[b]).abs())
            .sum();
        if best.as_ref().is_none_or(|(_, c)| cost < c - 1e-12) {
            best = Some((s, cost));
        }
    }
    best.expect("at least one subset")
}

/// Multiply-accumulates of a basic-block ResNet, conv and FC layers only,
/// written out from the layer shapes: 3x3 same-padded convs, a 1x1
/// projection wherever a block changes width or resolution, a final FC.
/// Returns the stem plus one entry per block, and the FC separately.
pub fn resnet_macs(
    input: [usize; 3],
    stem: (usize, usize),
    blocks: &[(usize, usize)],
    classes: usize,
) -> (Vec<u64>, u64) {
    let out = |x: usize, s: usize| (x - 1) / s + 1;
    let (mut c, mut h, mut w) = (input[0], input[1], input[2]);
    let mut per_unit = Vec::new();
    let (sc, ss) = stem;
    let (oh, ow) = (out(h, ss), out(w, ss));
    per_unit.push((9 * c * sc * oh * ow) as u64);
    (c, h, w) = (sc, oh, ow);
    for &(bc, bs) in blocks {
        let (oh, ow) = (out(h, bs), out(w, bs));
        let mut macs = 9 * c * bc * oh * ow + 9 * bc * bc * oh * ow;
        if bs != 1 || bc != c {
            macs += c * bc * oh * ow;
        }
        per_unit.push(macs as u64);
        (c, h, w) = (bc, oh, ow);
    }
    (per_unit, (c * classes) as u64)
}

pub fn six_n_plus_two_blocks(depth: usize) -> Vec<(usize, usize)> {
    let n = (depth - 2) / 6;
    let mut blocks = Vec::new();
    for (stage, c) in [16, 32, 64].into_iter().enumerate() {
        for i in 0..n {
            blocks.push((c, if stage > 0 && i == 0 { 2 } else { 1 }));
        }
    }
    blocks
}

/// Reference 6n+2 ResNet totals in MMac for 32x32 inputs.
pub const RESNET_MMAC: [(usize, f64); 4] = [(20, 41.41), (32, 70.06), (44, 98.72), (110, 256.32)];
