use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use pointgame_core::config::{ModelConfig, TrainConfig};
use pointgame_core::gate::patch_descriptors;
use pointgame_core::geometry::PointCloud;
use pointgame_core::io::{
    ingest, load_checkpoint, manifest_load, save_checkpoint, save_xyz, synth_shapes, write_dataset, Checkpoint, CheckpointConfig,
    ClassifierMeta, Dataset, DatasetManifest, Split,
};
use pointgame_core::mae::{split_seed, with_normals, Model, EXTRACT_SEED};
use pointgame_core::nn::{ParamStore, Tape};
use pointgame_core::selfcheck;
use pointgame_core::train::{
    evaluate_classifier, finetune, pretrain_loop, run_few_shot, Classifier, FinetuneProtocol, TrainObserver,
};
use pointgame_core::Error;

use crate::config::{resolve, CliConfig, Layers};
use crate::{Cli, Command, Failure, TrainFlags, EXIT_NUMERIC, EXIT_OK};

type Outcome = Result<i32, Failure>;

pub fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let cfg = resolve(&Layers {
        file: cli.config.config.as_deref(),
        preset: cli.config.preset,
        set: &cli.config.set,
    })?;
    match &cli.command {
        Command::Pretrain { data, out: dir, train } => pretrain(&cfg, data, dir, train, out, err),
        Command::Finetune {
            checkpoint,
            data,
            out: dir,
            scope,
            head,
            train,
        } => {
            let protocol = (*scope, *head);
            finetune_cmd(&cfg, checkpoint, data, dir, protocol, train, out, err)
        }
        Command::Eval { checkpoint, data, split } => eval(&cfg, checkpoint, data, split, out),
        Command::Fewshot {
            checkpoint,
            data,
            n_way,
            m_shot,
            episodes,
            scope,
            head,
            summary,
            train,
        } => fewshot(&cfg, checkpoint, data, (*n_way, *m_shot, *episodes), (*scope, *head), summary.as_deref(), train, out, err),
        Command::Extract {
            checkpoint,
            data,
            input,
            out: file,
        } => extract(&cfg, checkpoint, data.as_deref(), input, file.as_deref(), out),
        Command::Describe { input, out: file } => describe(&cfg, input, file.as_deref(), out),
        Command::Reconstruct {
            checkpoint,
            input,
            out: dir,
            seed,
        } => reconstruct(&cfg, checkpoint, input, dir, *seed, out),
        Command::Selfcheck => selfcheck_cmd(out, err),
        Command::Synth {
            out: dir,
            classes,
            per_class,
            test_per_class,
            points,
            seed,
        } => synth(&cfg, dir, classes, *per_class, *test_per_class, *points, *seed, out),
    }
}

fn apply_flags(mut train: TrainConfig, flags: &TrainFlags) -> Result<TrainConfig, Failure> {
    if let Some(e) = flags.epochs {
        train.epochs = e;
    }
    if let Some(s) = flags.seed {
        train.seed = s;
    }
    if let Some(b) = flags.batch_size {
        train.batch_size = b;
    }
    if let Some(lr) = flags.lr {
        train.lr_max = lr;
        train.lr_min = train.lr_min.min(lr);
    }
    train.validate()?;
    Ok(train)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), Failure> {
    out.write_all(text.as_bytes()).map_err(|e| Failure::io(Path::new("<stdout>"), e))
}

/// Entries of `split` plus untagged ones.
fn split_entries(manifest: &DatasetManifest, split: Split) -> DatasetManifest {
    DatasetManifest {
        root: manifest.root.clone(),
        entries: manifest
            .entries
            .iter()
            .filter(|e| e.split.is_none_or(|s| s == split))
            .cloned()
            .collect(),
        class_index: manifest.class_index.clone(),
    }
}

fn load_split(root: &Path, split: Split, model: &ModelConfig, seed: u64) -> Result<Dataset, Failure> {
    let manifest = manifest_load(root)?;
    let part = split_entries(&manifest, split);
    Ok(Dataset::load(&part, model.n, seed)?)
}

/// Load a checkpoint and settle the model configuration: the stored one,
/// which must agree with any explicitly requested model settings.
fn open_checkpoint(cfg: &CliConfig, path: &Path) -> Result<(Checkpoint, Model), Failure> {
    let ck = load_checkpoint(path)?;
    if cfg.model_explicit {
        ck.expect_model(&cfg.model)?;
    }
    let model = Model::new(&ck.config.model)?;
    Ok((ck, model))
}

fn curve_csv(curve: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        writeln!(s, "{},{l}", i + 1).unwrap();
    }
    s
}

struct CheckpointWriter<'a> {
    dir: &'a Path,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    written: Vec<PathBuf>,
    log: &'a mut dyn Write,
}

impl CheckpointWriter<'_> {
    fn save(&mut self, name: String, epoch: usize, params: &ParamStore<f32>) -> pointgame_core::Result<()> {
        let path = self.dir.join(name);
        let ck = Checkpoint {
            config: CheckpointConfig {
                model: self.model.clone(),
                train: self.train.clone(),
                epoch,
                classifier: None,
            },
            params: params.clone(),
        };
        save_checkpoint(&path, &ck)?;
        self.written.push(path);
        Ok(())
    }
}

impl TrainObserver for CheckpointWriter<'_> {
    fn epoch(&mut self, epoch: usize, loss: f64) {
        let _ = writeln!(self.log, "epoch {epoch}: loss {loss:.6}");
    }

    fn checkpoint(&mut self, epoch: usize, params: &ParamStore<f32>, last_good: bool) -> pointgame_core::Result<()> {
        let name = if last_good {
            "checkpoint_last_good.pgck".to_string()
        } else {
            format!("checkpoint_epoch_{epoch:04}.pgck")
        };
        self.save(name, epoch, params)
    }
}

fn pretrain(cfg: &CliConfig, data: &Path, dir: &Path, flags: &TrainFlags, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let train = apply_flags(cfg.train.clone(), flags)?;
    let dataset = load_split(data, Split::Train, &cfg.model, train.seed)?;
    let model = Model::new(&cfg.model)?;
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    let init = model.init_params::<f32>(train.seed)?;
    let mut writer = CheckpointWriter {
        dir,
        model: &cfg.model,
        train: &train,
        written: vec![],
        log: err,
    };
    let run = match pretrain_loop(&model, &dataset.clouds, &train, init, &mut writer) {
        Ok(run) => run,
        Err(e @ Error::Divergence(_)) => {
            let _ = writeln!(writer.log, "training diverged; last good state saved to {}", dir.join("checkpoint_last_good.pgck").display());
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    if !train.checkpoint_epochs.contains(&train.epochs) {
        writer.save(format!("checkpoint_epoch_{:04}.pgck", train.epochs), train.epochs, &run.params)?;
    }
    write_text(&dir.join("loss.csv"), &curve_csv(&run.curve))?;
    let mut report = String::from("checkpoint\n");
    for p in &writer.written {
        writeln!(report, "{}", p.display()).unwrap();
    }
    emit(out, &report)?;
    Ok(EXIT_OK)
}

/// Dataset labels re-indexed into `classes`.
fn relabel(data: &Dataset, classes: &[String]) -> Result<Vec<usize>, Failure> {
    data.labels
        .iter()
        .map(|&l| {
            let name = &data.classes[l];
            classes
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::LabelMismatch(format!("class `{name}` unknown to the classifier")).into())
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn finetune_cmd(
    cfg: &CliConfig,
    checkpoint: &Path,
    data: &Path,
    dir: &Path,
    (scope, head): (pointgame_core::train::Scope, pointgame_core::train::HeadKind),
    flags: &TrainFlags,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Outcome {
    let train = apply_flags(cfg.train.clone(), flags)?;
    let (ck, model) = open_checkpoint(cfg, checkpoint)?;
    let manifest = manifest_load(data)?;
    let classes: Vec<String> = manifest.class_index.keys().cloned().collect();
    let train_set = Dataset::load(&split_entries(&manifest, Split::Train), model.cfg.n, train.seed)?;
    let protocol = FinetuneProtocol {
        scope,
        head,
        num_classes: classes.len(),
    };
    struct Log<'a>(&'a mut dyn Write);
    impl TrainObserver for Log<'_> {
        fn epoch(&mut self, epoch: usize, loss: f64) {
            let _ = writeln!(self.0, "epoch {epoch}: loss {loss:.6}");
        }
    }
    let run = finetune(&model, &ck.params, &train_set.clouds, &train_set.labels, protocol, &train, &mut Log(err))?;
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    let saved = Checkpoint {
        config: CheckpointConfig {
            model: model.cfg.clone(),
            train: train.clone(),
            epoch: train.epochs,
            classifier: Some(ClassifierMeta { scope, head, classes }),
        },
        params: run.params.clone(),
    };
    save_checkpoint(&dir.join("classifier.pgck"), &saved)?;
    write_text(&dir.join("finetune_loss.csv"), &curve_csv(&run.curve))?;
    let mut report = String::from("split,items,accuracy\n");
    writeln!(report, "train,{},{}", train_set.len(), run.train_accuracy).unwrap();
    let test_part = manifest.split(Split::Test);
    if !test_part.entries.is_empty() {
        let test = Dataset::load(&test_part, model.cfg.n, train.seed)?;
        let acc = evaluate_classifier(&run.classifier, &run.params, &test.clouds, &test.labels)?;
        writeln!(report, "test,{},{acc}", test.len()).unwrap();
    }
    write_text(&dir.join("report.csv"), &report)?;
    emit(out, &report)?;
    Ok(EXIT_OK)
}

fn classifier_of(ck: &Checkpoint, model: Model) -> Result<(Classifier, ClassifierMeta), Failure> {
    let meta = ck.config.classifier.clone().ok_or_else(|| Failure {
        code: crate::EXIT_DATA,
        message: "checkpoint has no classifier head (run finetune first)".into(),
    })?;
    Ok((Classifier::new(model, meta.head, meta.classes.len()), meta))
}

fn eval(cfg: &CliConfig, checkpoint: &Path, data: &Path, split: &str, out: &mut dyn Write) -> Outcome {
    let split: Split = split.parse()?;
    let (ck, model) = open_checkpoint(cfg, checkpoint)?;
    let (classifier, meta) = classifier_of(&ck, model)?;
    let data = load_split(data, split, &ck.config.model, ck.config.train.seed)?;
    let labels = relabel(&data, &meta.classes)?;
    let acc = evaluate_classifier(&classifier, &ck.params, &data.clouds, &labels)?;
    let split_name = if split == Split::Train { "train" } else { "test" };
    emit(out, &format!("split,items,accuracy\n{split_name},{},{acc}\n", data.len()))?;
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn fewshot(
    cfg: &CliConfig,
    checkpoint: &Path,
    data: &Path,
    (n_way, m_shot, episodes): (usize, usize, usize),
    (scope, head): (pointgame_core::train::Scope, pointgame_core::train::HeadKind),
    summary: Option<&Path>,
    flags: &TrainFlags,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Outcome {
    let train = apply_flags(cfg.train.clone(), flags)?;
    let (ck, model) = open_checkpoint(cfg, checkpoint)?;
    let manifest = manifest_load(data)?;
    let all = Dataset::load(&manifest, model.cfg.n, train.seed)?;
    let report = run_few_shot(&model, &ck.params, &all.clouds, &all.labels, n_way, m_shot, episodes, scope, head, &train)?;
    let mut table = String::from("episode,train_items,test_items,accuracy\n");
    for (i, acc) in report.accuracies.iter().enumerate() {
        writeln!(table, "{},{},{},{acc}", i + 1, report.train_sizes[i], report.test_sizes[i]).unwrap();
    }
    emit(out, &table)?;
    let _ = writeln!(
        err,
        "{n_way}-way {m_shot}-shot: {:.2}% ± {:.2}% over {episodes} episodes",
        100.0 * report.mean,
        100.0 * report.std
    );
    if let Some(path) = summary {
        write_text(path, &format!("n_way,m_shot,episodes,mean,std\n{n_way},{m_shot},{episodes},{},{}\n", report.mean, report.std))?;
    }
    Ok(EXIT_OK)
}

fn extract(cfg: &CliConfig, checkpoint: &Path, data: Option<&Path>, inputs: &[PathBuf], file: Option<&Path>, out: &mut dyn Write) -> Outcome {
    let (ck, model) = open_checkpoint(cfg, checkpoint)?;
    let (names, clouds): (Vec<String>, Vec<PointCloud>) = match data {
        Some(root) => {
            let manifest = manifest_load(root)?;
            let d = Dataset::load(&manifest, model.cfg.n, 0)?;
            (d.names, d.clouds)
        }
        None if inputs.is_empty() => {
            return Err(Failure {
                code: crate::EXIT_USAGE,
                message: "extract needs --data or --input".into(),
            })
        }
        None => {
            let clouds = inputs.iter().map(|p| ingest(p, model.cfg.n, 0)).collect::<Result<Vec<_>, _>>()?;
            (inputs.iter().map(|p| p.display().to_string()).collect(), clouds)
        }
    };
    let width = 2 * model.cfg.d;
    let mut text = String::from("path");
    for j in 0..width {
        write!(text, ",f{j}").unwrap();
    }
    text.push('\n');
    for (name, cloud) in names.iter().zip(&clouds) {
        let f = model.extract_global_feature(cloud, &ck.params)?;
        text.push_str(name);
        for v in f {
            write!(text, ",{v}").unwrap();
        }
        text.push('\n');
    }
    match file {
        Some(path) => write_text(path, &text)?,
        None => emit(out, &text)?,
    }
    Ok(EXIT_OK)
}

fn describe(cfg: &CliConfig, input: &Path, file: Option<&Path>, out: &mut dyn Write) -> Outcome {
    let model_cfg = &cfg.model;
    let cloud = with_normals(&ingest(input, model_cfg.n, 0)?, model_cfg)?;
    let patches = pointgame_core::geometry::build_patches(&cloud, model_cfg.g, model_cfg.k, EXTRACT_SEED)?;
    let descriptors = patch_descriptors(&cloud, &patches, model_cfg)?;
    let mut text = String::new();
    let header: Vec<String> = ["alpha", "phi", "theta"]
        .iter()
        .flat_map(|a| (0..model_cfg.bins).map(move |b| format!("{a}{b}")))
        .collect();
    text.push_str(&header.join(","));
    text.push('\n');
    for d in &descriptors {
        let row: Vec<String> = d.histogram.iter().map(|v| v.to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    match file {
        Some(path) => write_text(path, &text)?,
        None => emit(out, &text)?,
    }
    Ok(EXIT_OK)
}

fn reconstruct(cfg: &CliConfig, checkpoint: &Path, inputs: &[PathBuf], dir: &Path, seed: u64, out: &mut dyn Write) -> Outcome {
    let (ck, model) = open_checkpoint(cfg, checkpoint)?;
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    let mut report = String::from("path,loss,masked_patches\n");
    for input in inputs {
        let cloud = with_normals(&ingest(input, model.cfg.n, 0)?, &model.cfg)?;
        let mut tape = Tape::with_params(&ck.params);
        let result = model.pretrain_forward(&mut tape, &cloud, seed)?;
        let (patch_seed, _) = split_seed(seed);
        let (patches, _) = model.gate_input::<f32>(&cloud, patch_seed)?;
        let visible: BTreeSet<usize> = result
            .mask
            .visible_indices
            .iter()
            .flat_map(|&p| patches.neighbor_indices[p].iter().copied())
            .collect();
        let visible_cloud = cloud.select(&visible.into_iter().collect::<Vec<_>>()).without_normals();
        let pred = tape.value(result.prediction).data();
        let k = model.cfg.k;
        let mut predicted = Vec::with_capacity(result.mask.masked_indices.len() * k);
        for (row, &p) in result.mask.masked_indices.iter().enumerate() {
            let c = patches.centers[p];
            for j in 0..k {
                let o = (row * k + j) * 3;
                predicted.push(c + pointgame_core::geometry::Vec3::new(pred[o] as f64, pred[o + 1] as f64, pred[o + 2] as f64));
            }
        }
        let stem = input.file_stem().map_or_else(|| "cloud".to_string(), |s| s.to_string_lossy().into_owned());
        save_xyz(&dir.join(format!("{stem}_input.xyz")), &cloud.without_normals())?;
        save_xyz(&dir.join(format!("{stem}_visible.xyz")), &visible_cloud)?;
        save_xyz(&dir.join(format!("{stem}_predicted.xyz")), &PointCloud::new(predicted))?;
        writeln!(
            report,
            "{},{},{}",
            input.display(),
            tape.value(result.loss).item(),
            result.mask.masked_indices.len()
        )
        .unwrap();
    }
    emit(out, &report)?;
    Ok(EXIT_OK)
}

fn selfcheck_cmd(out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let mut w = csv_writer();
    w.write_record(["suite", "status", "seconds", "detail"]).unwrap();
    let mut all = true;
    for suite in selfcheck::SUITES {
        let o = selfcheck::run_suite(suite);
        let _ = writeln!(err, "{o}");
        all &= o.passed;
        w.write_record([
            o.name.to_string(),
            if o.passed { "pass" } else { "fail" }.to_string(),
            format!("{:.3}", o.elapsed.as_secs_f64()),
            o.detail.clone(),
        ])
        .unwrap();
    }
    let bytes = w.into_inner().map_err(|e| Failure {
        code: crate::EXIT_DATA,
        message: e.to_string(),
    })?;
    emit(out, &String::from_utf8_lossy(&bytes))?;
    Ok(if all { EXIT_OK } else { EXIT_NUMERIC })
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(vec![])
}

#[allow(clippy::too_many_arguments)]
fn synth(
    cfg: &CliConfig,
    dir: &Path,
    classes: &[pointgame_core::io::Shape],
    per_class: usize,
    test_per_class: usize,
    points: Option<usize>,
    seed: u64,
    out: &mut dyn Write,
) -> Outcome {
    let n = points.unwrap_or(cfg.model.n);
    let mut data = synth_shapes(classes, per_class, n, seed)?;
    let mut splits = vec![Split::Train; data.len()];
    rename(&mut data, "train");
    if test_per_class > 0 {
        let mut test = synth_shapes(classes, test_per_class, n, seed.wrapping_add(1))?;
        rename(&mut test, "test");
        splits.extend(vec![Split::Test; test.len()]);
        data.clouds.extend(test.clouds);
        data.labels.extend(test.labels);
        data.names.extend(test.names);
    }
    write_dataset(dir, &data, Some(&splits))?;
    emit(out, &format!("classes,train_items,test_items\n{},{},{}\n", data.classes.join(" "), per_class * data.classes.len(), test_per_class * data.classes.len()))?;
    Ok(EXIT_OK)
}

/// `shape/shape_0001.xyz` to `shape/<split>_0001.xyz` so splits never collide.
fn rename(data: &mut Dataset, split: &str) {
    let mut counters = vec![0usize; data.classes.len()];
    for (name, &label) in data.names.iter_mut().zip(&data.labels) {
        *name = format!("{}/{split}_{:04}.xyz", data.classes[label], counters[label]);
        counters[label] += 1;
    }
}
