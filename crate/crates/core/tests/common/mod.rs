//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use besov_transfer::besov::BesovParams;
use besov_transfer::dynamics::{make_map, BranchSystem, MapSpec, SystemOptions};
use besov_transfer::transfer::{assemble_matrix, prepare, Transfer, TransferMatrix, TransferOptions};

pub const PHI: f64 = 1.618_033_988_749_895;

/// Built-in maps with the arity of their grid.
pub fn builtin_maps() -> Vec<(&'static str, MapSpec, u32)> {
    vec![
        ("doubling", MapSpec::doubling(), 2),
        ("ternary", MapSpec::m_ary(3), 3),
        ("golden", MapSpec::golden(), 2),
        ("pw_linear", MapSpec::pw_linear(vec![0.0, 0.4, 1.0], vec![2.5, -1.0 / 0.6], Some(vec![0.0, 1.0])), 2),
        ("lorenz", MapSpec::lorenz_cusp(0.75), 2),
        ("gauss", MapSpec::gauss(50), 2),
    ]
}

/// Working level used for a map in the tests.
pub fn level_for(arity: u32) -> u32 {
    if arity == 3 {
        6
    } else {
        10
    }
}

pub fn system(spec: &MapSpec, arity: u32, level: u32) -> BranchSystem {
    let options = SystemOptions { arity, working_level: level, ..SystemOptions::default() };
    make_map(spec, &BesovParams::default(), &options).expect("built-in map builds")
}

pub fn transfer(spec: &MapSpec, arity: u32, level: u32) -> Transfer {
    prepare(system(spec, arity, level), TransferOptions::default()).expect("prepare succeeds")
}

pub fn matrix(spec: &MapSpec, arity: u32, level: u32) -> TransferMatrix {
    assemble_matrix(&transfer(spec, arity, level)).expect("matrix assembles")
}

/// Two decoupled doubling maps on the halves of `[0, 1]`.
pub fn decoupled() -> MapSpec {
    MapSpec::pw_linear(vec![0.0, 0.25, 0.5, 0.75, 1.0], vec![2.0; 4], Some(vec![0.0, 0.0, 0.5, 0.5]))
}

/// The two halves of `[0, 1]` exchanged by doubling maps.
pub fn swap() -> MapSpec {
    MapSpec::pw_linear(vec![0.0, 0.25, 0.5, 0.75, 1.0], vec![2.0; 4], Some(vec![0.5, 0.5, 0.0, 0.0]))
}

/// Invariant density of the golden-mean β-map by an Ulam scheme at `2^level`
/// cells, built from exact interval images and iterated to a fixed point.
pub fn golden_ulam_oracle(level: u32) -> Vec<f64> {
    let n = 1usize << level;
    let h = 1.0 / n as f64;
    let cut = 1.0 / PHI;
    // (target cell, fraction of the source cell) per source cell.
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        let (lo, hi) = (i as f64 * h, (i + 1) as f64 * h);
        let mut row = Vec::new();
        for (a, b, shift) in [(lo, hi.min(cut), 0.0), (lo.max(cut), hi, 1.0)] {
            if b <= a {
                continue;
            }
            let (ya, yb) = (PHI * a - shift, PHI * b - shift);
            let first = ((ya / h).floor() as usize).min(n - 1);
            let last = (((yb / h).ceil() as usize).max(first + 1)).min(n);
            for j in first..last {
                let (cl, ch) = (j as f64 * h, (j + 1) as f64 * h);
                let overlap = (yb.min(ch) - ya.max(cl)).max(0.0);
                if overlap > 0.0 {
                    row.push((j, overlap / PHI / h));
                }
            }
        }
        rows.push(row);
    }
    let mut rho = vec![1.0; n];
    for _ in 0..10_000 {
        let mut next = vec![0.0; n];
        for (i, row) in rows.iter().enumerate() {
            for &(j, w) in row {
                next[j] += rho[i] * w;
            }
        }
        let mass: f64 = next.iter().sum::<f64>() * h;
        next.iter_mut().for_each(|x| *x /= mass);
        let change: f64 = next.iter().zip(&rho).map(|(a, b)| (a - b).abs()).sum::<f64>() * h;
        rho = next;
        if change < 1e-14 {
            break;
        }
    }
    rho
}

/// Cell averages of the Gauss density `1/((1+x) ln 2)`.
pub fn gauss_density_averages(level: u32) -> Vec<f64> {
    let n = 1usize << level;
    let h = 1.0 / n as f64;
    (0..n)
        .map(|j| {
            let (a, b) = (j as f64 * h, (j + 1) as f64 * h);
            ((1.0 + b).ln() - (1.0 + a).ln()) / std::f64::consts::LN_2 / h
        })
        .collect()
}

/// L¹ distance of two level-`k` cell-value vectors of different resolution,
/// comparing on the finer one.
pub fn l1_resampled(coarse: &[f64], fine: &[f64]) -> f64 {
    let ratio = fine.len() / coarse.len();
    let h = 1.0 / fine.len() as f64;
    fine.iter().enumerate().map(|(j, f)| (f - coarse[j / ratio]).abs()).sum::<f64>() * h
}
