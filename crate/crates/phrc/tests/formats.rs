use std::path::Path;

use phrc::checkpoint::{load_model, model_to_string, parse_model, save_model};
use phrc::corpus::{corpus_to_string, parse_corpus, read_corpus, write_corpus};
use phrc::episode_log::{parse_log, read_log, write_log};
use phrc::Error;
use phrc_core::control::ControllerConfig;
use phrc_core::datagen::{gen_multimodal, gen_phrc};
use phrc_core::intent::{BranchModel, ConstantVelocity, ModelConfig, Predictor};
use phrc_core::nn::NetConfig;
use phrc_core::sim::{run_episode, EpisodeOptions, Scenario};
use phrc_core::trajectory::{slice_windows, Branch, CorpusManifest, Trajectory};

fn tiny_net() -> NetConfig {
    NetConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        d_z: 4,
        n_mix: 2,
        dropout: 0.0,
    }
}

fn split(trajs: &[Trajectory], branch: Branch) -> Vec<Trajectory> {
    trajs.iter().filter(|t| t.branch() == branch).cloned().collect()
}

#[test]
fn corpus_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mixed = gen_phrc(2, 3, 0.02, 5).unwrap();
    let cases = [
        (Branch::Robot, gen_multimodal(4, 0.05, 1).unwrap()),
        (Branch::Robot, split(&mixed, Branch::Robot)),
        (Branch::Human, split(&mixed, Branch::Human)),
    ];
    for (i, (branch, trajs)) in cases.into_iter().enumerate() {
        let dt = trajs[0].dt();
        let manifest = CorpusManifest::describe(&trajs, branch, dt, 5).unwrap();
        let params = serde_json::json!({ "case": i });
        let path = dir.path().join(format!("c{i}.csv"));
        write_corpus(&path, &manifest, &trajs, Some(&params)).unwrap();
        let (m2, t2) = read_corpus(&path).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(t2, trajs);
    }
}

#[test]
fn corpus_rejects_malformed_input() {
    let trajs = split(&gen_phrc(0, 2, 0.02, 5).unwrap(), Branch::Human);
    let manifest = CorpusManifest::describe(&trajs, Branch::Human, 0.02, 5).unwrap();
    let good = corpus_to_string(&manifest, &trajs, None).unwrap();
    let p = Path::new("x.csv");
    assert!(parse_corpus(&good, p).is_ok());

    let no_manifest = good.split_once('\n').unwrap().1;
    assert!(matches!(parse_corpus(no_manifest, p), Err(Error::Format { line: 1, .. })));

    let bad_header = good.replacen("traj,t,", "traj,time,", 1);
    assert!(matches!(parse_corpus(&bad_header, p), Err(Error::Format { line: 2, .. })));

    // Human corpora must carry force on every row.
    let mut lines: Vec<String> = good.lines().map(String::from).collect();
    let row = lines[2].rsplitn(4, ',').last().unwrap().to_string();
    lines[2] = format!("{row},,,");
    let missing_force = lines.join("\n");
    assert!(matches!(parse_corpus(&missing_force, p), Err(Error::Format { line: 3, .. })));

    let truncated: String = good.lines().take(10).map(|l| format!("{l}\n")).collect();
    let err = parse_corpus(&truncated, p).unwrap_err();
    assert!(err.is_validation(), "{err}");

    let non_numeric = good.replacen(",0.02,", ",abc,", 1);
    assert!(matches!(parse_corpus(&non_numeric, p), Err(Error::Format { .. })));
}

#[test]
fn checkpoint_round_trips_and_predicts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let trajs = split(&gen_phrc(0, 1, 0.02, 3).unwrap(), Branch::Human);
    let windows = slice_windows(&trajs[0], 8, 12, 20).unwrap();
    let cfg = ModelConfig::new(Branch::Human, tiny_net());
    let model = BranchModel::new(cfg, 11).unwrap();
    let path = dir.path().join("human.ckpt");
    save_model(&path, &model, Some(0.02)).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.dt, Some(0.02));
    assert_eq!(back.model.config(), model.config());
    assert_eq!(back.model.normalizer(), model.normalizer());
    for w in &windows {
        assert_eq!(back.model.predict(&w.past).unwrap(), model.predict(&w.past).unwrap());
    }
    assert_eq!(model_to_string(&back.model, back.dt), model_to_string(&model, Some(0.02)));
}

#[test]
fn checkpoint_rejects_damaged_files() {
    let model = BranchModel::new(ModelConfig::new(Branch::Robot, tiny_net()), 1).unwrap();
    let text = model_to_string(&model, None);
    let p = Path::new("m.ckpt");
    assert!(parse_model(&text, p).is_ok());

    let lines: Vec<&str> = text.lines().collect();
    let dropped = [&lines[..4], &lines[5..]].concat().join("\n");
    assert!(matches!(parse_model(&dropped, p), Err(Error::Format { .. })));

    let mut doubled = lines.clone();
    doubled.push(lines[4]);
    assert!(matches!(parse_model(&doubled.join("\n"), p), Err(Error::Format { .. })));

    let (name, rest) = lines[4].split_once(';').unwrap();
    let renamed = text.replacen(lines[4], &format!("{name}_x;{rest}"), 1);
    assert!(matches!(parse_model(&renamed, p), Err(Error::Format { .. })));

    let garbled = text.replacen(lines[4], &format!("{name};1,1;@@@"), 1);
    assert!(matches!(parse_model(&garbled, p), Err(Error::Format { .. })));

    let bad_json = text.replacen("#MODEL {", "#MODEL {\"extra\":1,", 1);
    assert!(matches!(parse_model(&bad_json, p), Err(Error::Json { .. })));
}

#[test]
fn episode_log_round_trips_and_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let robot = ConstantVelocity {
        branch: Branch::Robot,
        obs_len: 8,
        fut_len: 12,
    };
    let human = ConstantVelocity {
        branch: Branch::Human,
        ..robot
    };
    let scenario = Scenario::standard(3);
    let log = run_episode(&scenario, &ControllerConfig::default(), &robot, &human, &EpisodeOptions::default(), 3).unwrap();
    let path = dir.path().join("episode_3.csv");
    write_log(&path, &log).unwrap();
    let saved = read_log(&path).unwrap();
    assert_eq!(saved.header, log.header);
    assert_eq!(saved.rows.len(), log.ticks.len());
    assert_eq!(saved.metrics(true), log.header.metrics);
    assert_eq!(saved.min_clearance(), log.header.min_clearance);
    for (r, t) in saved.rows.iter().zip(&log.ticks) {
        assert_eq!((r.t, r.x, r.v, r.f_h, r.f_r, r.kappa), (t.t, t.x, t.v, t.f_h, t.f_r, t.kappa));
    }

    let text = std::fs::read_to_string(&path).unwrap();
    let short_row = text.replacen(",0.5\n", "\n", 1);
    assert!(parse_log(&short_row, &path).is_err());
    assert!(matches!(parse_log("t,x\n", &path), Err(Error::Format { line: 1, .. })));
}
