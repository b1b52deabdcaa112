//! Scratch pilot for the permutation-ablation measurement. Not part of the
//! suite; run explicitly with --ignored.

use gridlm::model::ModelConfig;
use gridlm::spatial_loss::SpatialLossConfig;
use gridlm::trainer::{fit, Corpus, TrainConfig};
use gridlm::{checkpoint, synthtext};
use gridlm_cli::commands::{cmd_contrast, ContrastArgs};
use ndarray::Array2;
use std::path::Path;

fn plain_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(&x, &y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|&x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|&y| (y - mb) * (y - mb)).sum();
    cov / (va.sqrt() * vb.sqrt())
}

fn grid_maps(ckpt: &Path, stimuli: &Path, out: &Path) -> Vec<(String, Array2<f64>)> {
    let outputs = cmd_contrast(&ContrastArgs {
        checkpoint: ckpt.to_path_buf(),
        stimuli: stimuli.to_path_buf(),
        condition_a: "digits".into(),
        condition_b: "letters".into(),
        fwhm: None,
        unit_spacing: 1.0,
        pool_fdr: false,
        q: 0.05,
        out: out.to_path_buf(),
    })
    .unwrap();
    outputs
        .maps
        .iter()
        .map(|(hook, csv)| {
            let map = gridlm::export::read_statmap_csv(csv).unwrap();
            let mut grid = Array2::zeros((map.height, map.width));
            for (u, c) in map.cells.iter().enumerate() {
                grid[[c.row, c.col]] = map.t[u];
            }
            (hook.to_string(), grid)
        })
        .collect()
}

#[test]
#[ignore]
fn pilot_permutation_ablation_structure() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = Corpus::from_bytes(synthtext::corpus(20_240_817, 1_000_000).as_bytes(), 0.9).unwrap();
    let stimuli_path = dir.path().join("stimuli.tsv");
    std::fs::write(&stimuli_path, synthtext::contrast_stimuli(20_240_818, 40).to_tsv_string()).unwrap();

    let train = TrainConfig {
        batch_size: 8,
        total_steps: 500,
        eval_interval: 250,
        eval_batches: 4,
        seed: 20_240_817,
        ..Default::default()
    };
    let spatial = SpatialLossConfig::default();

    for permute in [true, false] {
        let label = if permute { "permuted" } else { "unpermuted" };
        let config = ModelConfig {
            permutation_seed: 20_240_817,
            permute_spatial: permute,
            ..ModelConfig::desk_default()
        };
        let mut model = gridlm::model::TopoTransformer::init(config, train.seed).unwrap();
        let report = fit(&mut model, &corpus, &train, Some(&spatial), &dir.path().join(label)).unwrap();
        drop(checkpoint::load(&report.checkpoint_path).unwrap());

        let maps = grid_maps(&report.checkpoint_path, &stimuli_path, &dir.path().join(format!("{label}_maps")));
        println!("== {label}: full map-correlation matrix");
        print!("{:>9}", "");
        for (name, _) in &maps {
            print!("{name:>9}");
        }
        println!();
        for (i, (name_i, gi)) in maps.iter().enumerate() {
            print!("{name_i:>9}");
            let a: Vec<f64> = gi.iter().copied().collect();
            for (j, (_, gj)) in maps.iter().enumerate() {
                if j <= i {
                    print!("{:>9}", "");
                    continue;
                }
                let b: Vec<f64> = gj.iter().copied().collect();
                print!("{:>9.3}", plain_pearson(&a, &b));
            }
            println!();
        }
    }
}
