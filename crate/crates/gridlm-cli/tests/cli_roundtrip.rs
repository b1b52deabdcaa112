//! End-to-end pipeline round trips on a tiny model: every subcommand runs,
//! artifacts parse back, exported statistics match in-process computation,
//! and re-runs are bit-identical.

use gridlm::export::{read_map_csv, read_statmap_csv, MapFile};
use gridlm::model::ModelConfig;
use gridlm::spatial_loss::SpatialLossConfig;
use gridlm::trainer::TrainConfig;
use gridlm_cli::commands::{
    cmd_activations, cmd_clusters, cmd_contrast, cmd_moran, cmd_profile, cmd_smooth, cmd_train,
    ActivationsArgs, ClustersArgs, ContiguityArg, ContrastArgs, MoranArgs, ProfileArgs,
    SignArg, SmoothArgs, TrainArgs, TrainRunConfig,
};
use gridlm_cli::manifest::file_sha256;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

struct Pipeline {
    _dir: tempfile::TempDir,
    root: PathBuf,
    checkpoint: PathBuf,
    stimuli: PathBuf,
    contrast_dir: PathBuf,
    first_map: PathBuf,
}

fn tiny_train_config(root: &Path) -> TrainRunConfig {
    TrainRunConfig {
        model: ModelConfig {
            vocab_size: 256,
            block_size: 128,
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            grid_width: 4,
            grid_height: 4,
            permute_spatial: true,
            permutation_seed: 11,
            dropout_rate: 0.0,
        },
        train: TrainConfig {
            batch_size: 4,
            total_steps: 80,
            warmup_steps: Some(6),
            eval_interval: 60,
            eval_batches: 2,
            seed: 17,
            ..Default::default()
        },
        spatial: Some(SpatialLossConfig { radius: 1, ..Default::default() }),
        data: gridlm_cli::commands::DataConfig {
            paths: vec![root.join("corpus.txt")],
            split_fraction: 0.9,
        },
        out_dir: root.join("run"),
    }
}

fn pipeline() -> &'static Pipeline {
    static PIPELINE: OnceLock<Pipeline> = OnceLock::new();
    PIPELINE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("corpus.txt"), gridlm::synthtext::corpus(3, 80_000)).unwrap();
        std::fs::write(
            root.join("stimuli.tsv"),
            gridlm::synthtext::contrast_stimuli(4, 12).to_tsv_string(),
        )
        .unwrap();
        let config = tiny_train_config(&root);
        let config_path = root.join("train.json");
        std::fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();

        let train_out = cmd_train(&TrainArgs { config: config_path }).unwrap();
        assert!(train_out.checkpoint.exists());
        assert!(train_out.loss_csv.exists());
        assert!(root.join("run/manifest.json").exists());
        let loaded = gridlm::checkpoint::load(&train_out.checkpoint).unwrap();
        assert_eq!(
            loaded.spatial.map(|s| s.alpha),
            Some(2.5),
            "checkpoint should record the spatial weight it was trained with"
        );

        let contrast_dir = root.join("contrast");
        let contrast = cmd_contrast(&ContrastArgs {
            checkpoint: train_out.checkpoint.clone(),
            stimuli: root.join("stimuli.tsv"),
            condition_a: "digits".into(),
            condition_b: "letters".into(),
            fwhm: None,
            unit_spacing: 1.0,
            pool_fdr: false,
            q: 0.05,
            out: contrast_dir.clone(),
        })
        .unwrap();
        assert_eq!(contrast.maps.len(), 4, "one map per hook");

        Pipeline {
            root,
            checkpoint: train_out.checkpoint,
            stimuli: dir.path().join("stimuli.tsv"),
            first_map: contrast.maps[0].1.clone(),
            contrast_dir,
            _dir: dir,
        }
    })
}

#[test]
fn contrast_outputs_parse_and_match_layouts() {
    let p = pipeline();
    let map = read_statmap_csv(&p.first_map).unwrap();
    assert_eq!(map.n_units(), 16);
    assert_eq!((map.width, map.height), (4, 4));
    assert!(map.t.iter().any(|&t| t != 0.0));
    assert!(p.contrast_dir.join("contrast_L0.attn_pos.pgm").exists());
    assert!(p.contrast_dir.join("contrast_L0.attn_neg.pgm").exists());
}

#[test]
fn moran_csv_round_trip_matches_in_process() {
    let p = pipeline();
    let out = cmd_moran(&MoranArgs {
        map: p.first_map.clone(),
        contiguity: ContiguityArg::Queen,
        islands: false,
        masked: false,
        permutations: 0,
        seed: 0,
        out: p.root.join("moran"),
    })
    .unwrap();
    let map = read_statmap_csv(&p.first_map).unwrap();
    let direct = gridlm_cli::commands::moran_of_statmap(
        &map,
        gridlm::spatstats::Contiguity::Queen,
    )
    .unwrap();
    assert!(
        (out.report.i - direct).abs() < 1e-12,
        "CSV round trip drifted: {} vs {}",
        out.report.i,
        direct
    );
}

#[test]
fn masked_moran_requires_islands() {
    let p = pipeline();
    let err = cmd_moran(&MoranArgs {
        map: p.first_map.clone(),
        contiguity: ContiguityArg::Queen,
        islands: false,
        masked: true,
        permutations: 0,
        seed: 0,
        out: p.root.join("moran_masked"),
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn clusters_and_profile_round_trip() {
    let p = pipeline();
    let clusters_out = cmd_clusters(&ClustersArgs {
        map: p.first_map.clone(),
        q: 0.05,
        min_size: 1,
        sign: SignArg::Both,
        out: p.root.join("clusters"),
    })
    .unwrap();
    // sorted by size descending
    for pair in clusters_out.clusters.windows(2) {
        assert!(pair[0].size >= pair[1].size);
    }

    let profile = cmd_profile(&ProfileArgs {
        checkpoint: p.checkpoint.clone(),
        clusters: clusters_out.clusters_json.clone(),
        stimuli: p.stimuli.clone(),
        fwhm: None,
        unit_spacing: 1.0,
        out: p.root.join("profile"),
    })
    .unwrap();
    // two conditions per cluster
    assert_eq!(profile.rows.len(), clusters_out.clusters.len() * 2);
    for (_, _, value) in &profile.rows {
        assert!(*value >= 0.0);
    }
}

#[test]
fn smooth_and_activations_commands_run() {
    let p = pipeline();
    let smooth = cmd_smooth(&SmoothArgs {
        map: p.first_map.clone(),
        fwhm: 2.0,
        unit_spacing: 1.0,
        out: p.root.join("smooth"),
    })
    .unwrap();
    match read_map_csv(&smooth.smoothed_csv).unwrap() {
        MapFile::Raw { width, height, .. } => assert_eq!((width, height), (4, 4)),
        MapFile::Stat(_) => panic!("smoothed output should be a raw map"),
    }

    let acts = cmd_activations(&ActivationsArgs {
        checkpoint: p.checkpoint.clone(),
        stimuli: p.stimuli.clone(),
        hook: Some("L1.mlp".into()),
        fwhm: Some(2.0),
        unit_spacing: 1.0,
        out: p.root.join("acts"),
    })
    .unwrap();
    assert_eq!(acts.files.len(), 1);
    let text = std::fs::read_to_string(&acts.files[0].1).unwrap();
    assert_eq!(text.lines().count(), 1 + 24); // header + 12 per condition
}

#[test]
fn contrast_rerun_is_bit_identical() {
    let p = pipeline();
    let rerun_dir = p.root.join("contrast_rerun");
    let rerun = cmd_contrast(&ContrastArgs {
        checkpoint: p.checkpoint.clone(),
        stimuli: p.stimuli.clone(),
        condition_a: "digits".into(),
        condition_b: "letters".into(),
        fwhm: None,
        unit_spacing: 1.0,
        pool_fdr: false,
        q: 0.05,
        out: rerun_dir,
    })
    .unwrap();
    for ((hook_a, path_a), (hook_b, path_b)) in
        rerun.maps.iter().zip(read_dir_sorted(&p.contrast_dir))
    {
        assert_eq!(hook_a.to_string(), hook_b);
        assert_eq!(
            file_sha256(path_a).unwrap(),
            file_sha256(&path_b).unwrap(),
            "contrast output {hook_a} not reproducible"
        );
    }
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, PathBuf)> {
    let mut out: Vec<(String, PathBuf)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            let hook = p
                .file_stem()
                .unwrap()
                .to_string_lossy()
                .trim_start_matches("contrast_")
                .to_string();
            (hook, p)
        })
        .collect();
    out.sort();
    out
}

#[test]
fn unknown_condition_lists_available_labels() {
    let p = pipeline();
    let err = cmd_contrast(&ContrastArgs {
        checkpoint: p.checkpoint.clone(),
        stimuli: p.stimuli.clone(),
        condition_a: "verbs".into(),
        condition_b: "letters".into(),
        fwhm: None,
        unit_spacing: 1.0,
        pool_fdr: false,
        q: 0.05,
        out: p.root.join("bad_contrast"),
    })
    .unwrap_err();
    let msg = format!("{err}");
    assert!(msg.contains("digits") && msg.contains("letters"), "{msg}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_gridlm");
    let dir = tempfile::tempdir().unwrap();

    // usage error from clap: unknown subcommand
    let out = Command::new(bin).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // data error: missing file
    let out = Command::new(bin)
        .args(["moran", "--map", "/nonexistent.csv", "--out"])
        .arg(dir.path().join("m1"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    // numeric failure: constant map has undefined Moran's I
    let flat = dir.path().join("flat.csv");
    let mut text = String::from("row,col,value\n");
    for r in 0..3 {
        for c in 0..3 {
            text.push_str(&format!("{r},{c},1.0\n"));
        }
    }
    std::fs::write(&flat, text).unwrap();
    let out = Command::new(bin)
        .args(["moran", "--map"])
        .arg(&flat)
        .args(["--permutations", "0", "--out"])
        .arg(dir.path().join("m2"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    // success: checkerboard map, rook contiguity, I = -1 exactly
    let board = dir.path().join("board.csv");
    let mut text = String::from("row,col,value\n");
    for r in 0..4 {
        for c in 0..4 {
            text.push_str(&format!("{r},{c},{}\n", if (r + c) % 2 == 0 { 1.0 } else { -1.0 }));
        }
    }
    std::fs::write(&board, text).unwrap();
    let out = Command::new(bin)
        .args(["moran", "--map"])
        .arg(&board)
        .args(["--contiguity", "rook", "--permutations", "0", "--out"])
        .arg(dir.path().join("m3"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("-1.0") || stdout.contains("-1,"), "{stdout}");
}
