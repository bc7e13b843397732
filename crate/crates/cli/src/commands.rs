use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};

use cscfa::cfa::{read_dictionary, train_cfa, write_dictionary, write_trace_csv, TraceRow};
use cscfa::classifier::{
    extract_features, read_features_csv, softmax_train, write_classification_csv, write_features_csv,
    ClassificationRow, FeatureSource, LabeledFeatures,
};
use cscfa::cs::{
    read_measurements, reconstruct_insitu, reconstruct_prelearned, write_measurements, write_metrics_csv,
    MeasurementSet, MetricsRow, ReconstructionResult,
};
use cscfa::dataio::{csv_psnr, idx_pair, load_idx, psnr, save_image_pgm, write_csv, Dataset};
use cscfa::deep::{reconstruct_projected, train_two_layer, LayerConfig, LayerInput, LayerSpec, StoredTwoLayer};
use cscfa::sensing::{measurements_for_csr, OperatorDescriptor, SensingOperator};
use cscfa::tensor::{ConvDictionary, FeatureSet, ImageTensor};

use crate::manifest::{sidecar, Manifest};
use crate::settings::{parse_pair, Settings};
use crate::{
    BenchmarkArgs, ClassifyArgs, CliError, GlobalArgs, ImageArgs, MeasureArgs, ReconstructArgs, TrainDictArgs,
};

/// Image file and label file for `--images`, which may name a directory.
fn idx_paths(images: &Path, labels: Option<&Path>) -> (PathBuf, Option<PathBuf>) {
    if images.is_dir() {
        let (i, l) = idx_pair(images);
        let l = labels.map(Path::to_path_buf).or_else(|| l.exists().then_some(l));
        (i, l)
    } else {
        (images.to_path_buf(), labels.map(Path::to_path_buf))
    }
}

fn load(images: &Path, labels: Option<&Path>, need_labels: bool) -> Result<Dataset, CliError> {
    let (i, l) = idx_paths(images, labels);
    if need_labels && l.is_none() {
        return Err(CliError::Usage(format!("{}: labels are required (--labels)", images.display())));
    }
    Ok(load_idx(&i, l.as_deref())?)
}

fn load_range(a: &ImageArgs) -> Result<Dataset, CliError> {
    let all = load(&a.images, a.labels.as_deref(), false)?;
    take(&all, a.start, a.count.unwrap_or(usize::MAX))
}

fn take(all: &Dataset, start: usize, count: usize) -> Result<Dataset, CliError> {
    let d = all.slice(start, count);
    if d.is_empty() || (count != usize::MAX && d.len() != count) {
        return Err(CliError::Usage(format!(
            "{} holds {} images; cannot take {} from index {start}",
            all.source,
            all.len(),
            if count == usize::MAX { "any".to_string() } else { count.to_string() }
        )));
    }
    Ok(d)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    ensure_parent(path)?;
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Usage(format!("{}: {e}", dir.display()))),
        _ => Ok(()),
    }
}

fn finish_file(w: BufWriter<File>, path: &Path) -> Result<(), CliError> {
    w.into_inner()
        .map_err(|e| e.into_error())
        .and_then(|f| f.sync_all())
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut w = create(path)?;
    f(&mut w).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    w.flush()?;
    finish_file(w, path)
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn read_dict(path: &Path) -> Result<ConvDictionary, CliError> {
    Ok(read_dictionary(&mut open(path)?, 0)?)
}

fn cg_warnings(trace: &[TraceRow]) -> usize {
    trace.iter().map(|r| r.cg_warnings).sum()
}

/// Reports capped CG solves; fatal only under `--strict`.
fn check_cg(g: &GlobalArgs, warnings: usize) -> Result<(), CliError> {
    if warnings == 0 {
        return Ok(());
    }
    eprintln!("warning: {warnings} CG solves stopped at the iteration cap");
    if g.strict {
        Err(CliError::CgWarnings(warnings))
    } else {
        Ok(())
    }
}

fn build_operator(settings: &Settings, csr: f64, pixels: usize, seed: u64) -> Result<Arc<SensingOperator>, CliError> {
    let desc = OperatorDescriptor {
        kind: settings.matrix()?,
        rows: measurements_for_csr(csr, pixels)?,
        cols: pixels,
        seed,
    };
    Ok(Arc::new(desc.build()?))
}

fn pixels(images: &[ImageTensor]) -> usize {
    images.first().map_or(0, |x| x.len())
}

fn write_pgms(dir: &Path, images: &[ImageTensor]) -> Result<(), CliError> {
    for (n, x) in images.iter().enumerate() {
        save_image_pgm(x, &dir.join(format!("recon_{n:05}.pgm")))?;
    }
    Ok(())
}

pub fn train_dict(g: &GlobalArgs, mut settings: Settings, a: &TrainDictArgs) -> Result<(), CliError> {
    settings.set_opt("atoms", a.atoms);
    settings.set_opt("kernel", a.kernel.as_deref());
    a.solver.apply(&mut settings);
    let atoms: usize = settings.require("atoms")?;
    let kernel = settings.kernel("kernel")?;
    let config = settings.solver(g.seed)?;
    let data = load_range(&a.images)?;
    ensure_parent(&a.out)?;

    let mut manifest = Manifest::new("train-dict", g, &settings);
    manifest.path("images", &a.images.images);
    manifest.push("start", a.images.start);
    manifest.push("count", data.len());
    manifest.path("out", &a.out);

    let warnings = if let Some(atoms2) = a.layer2 {
        let first = &data.images[0];
        let pool = parse_pair(&a.pool).map_err(CliError::Usage)?;
        let kernel2 = parse_pair(&a.kernel2).map_err(CliError::Usage)?;
        let layers = LayerConfig::new(
            (first.height(), first.width()),
            [
                LayerSpec { atoms, kernel, pool },
                LayerSpec {
                    atoms: atoms2,
                    kernel: kernel2,
                    pool: (1, 1),
                },
            ],
        )
        .map_err(|e| CliError::Usage(e.to_string()))?;
        let model = train_two_layer(LayerInput::Images(&data.images), &layers, &config, &config)?;
        write_file(&a.out, |w| model.write_to(w))?;
        write_trace_csv(&sidecar(&a.out, "trace.csv"), &model.trace1)?;
        write_trace_csv(&sidecar(&a.out, "layer2.trace.csv"), &model.trace2)?;
        manifest.push("layer2", atoms2);
        manifest.push("kernel2", format!("{}x{}", kernel2.0, kernel2.1));
        manifest.push("pool", format!("{}x{}", pool.0, pool.1));
        eprintln!(
            "layer 1 recon_err {:.4e}, layer 2 recon_err {:.4e}",
            model.trace1.last().map_or(f64::NAN, |r| r.recon_err),
            model.trace2.last().map_or(f64::NAN, |r| r.recon_err)
        );
        cg_warnings(&model.trace1) + cg_warnings(&model.trace2)
    } else {
        let model = train_cfa(&data.images, atoms, kernel, &config)?;
        write_file(&a.out, |w| write_dictionary(w, &model.dictionary))?;
        write_trace_csv(&sidecar(&a.out, "trace.csv"), &model.trace)?;
        if let Some(last) = model.trace.last() {
            eprintln!("{} iterations, recon_err {:.4e}", last.iter, last.recon_err);
        }
        model.cg_warnings()
    };
    manifest.push("cg_warnings", warnings);
    manifest.write(&sidecar(&a.out, "manifest"))?;
    check_cg(g, warnings)
}

pub fn measure(g: &GlobalArgs, mut settings: Settings, a: &MeasureArgs) -> Result<(), CliError> {
    settings.set_opt("matrix", a.matrix.as_deref());
    let data = load_range(&a.images)?;
    let op = build_operator(&settings, a.csr, pixels(&data.images), g.seed)?;
    let rows = op.rows();
    let meas = MeasurementSet::measure(&data.images, op)?;
    write_file(&a.out, |w| write_measurements(w, &meas))?;

    let mut manifest = Manifest::new("measure", g, &settings);
    manifest.path("images", &a.images.images);
    manifest.push("start", a.images.start);
    manifest.push("count", data.len());
    manifest.push("csr", a.csr);
    manifest.push("measurements_per_image", rows);
    manifest.path("out", &a.out);
    manifest.write(&sidecar(&a.out, "manifest"))?;
    eprintln!("{} images, M = {rows}", data.len());
    Ok(())
}

pub fn reconstruct(g: &GlobalArgs, mut settings: Settings, a: &ReconstructArgs) -> Result<(), CliError> {
    settings.set_opt("atoms", a.atoms);
    settings.set_opt("kernel", a.kernel.as_deref());
    a.solver.apply(&mut settings);
    let config = settings.solver(g.seed)?;
    let meas = read_measurements(&mut open(&a.measurements)?)?;
    let truth = match &a.truth {
        Some(p) => Some(take(&load(p, None, false)?, a.truth_start, meas.len())?),
        None => None,
    };
    std::fs::create_dir_all(&a.out)?;

    let mut manifest = Manifest::new("reconstruct", g, &settings);
    manifest.path("measurements", &a.measurements);
    let result: ReconstructionResult = if let Some(d) = &a.dict {
        manifest.path("dict", d);
        reconstruct_prelearned(&meas, &read_dict(d)?, &config)?
    } else if let Some(p) = &a.projected_dict {
        manifest.path("projected_dict", p);
        let stored = StoredTwoLayer::read_from(&mut open(p)?)?;
        reconstruct_projected(&meas, &stored.projected_dictionary()?, &config)?
    } else {
        manifest.push("in_situ", true);
        let atoms: usize = settings.require("atoms")?;
        let kernel = settings.kernel("kernel")?;
        let r = reconstruct_insitu(&meas, atoms, kernel, &config)?;
        let dict_path = a.out.join("dictionary.cfad");
        write_file(&dict_path, |w| write_dictionary(w, &r.dictionary))?;
        r
    };

    write_pgms(&a.out, &result.images)?;
    let iters = result.iterations();
    let mut rows = Vec::with_capacity(result.images.len());
    for (n, x) in result.images.iter().enumerate() {
        let p = match &truth {
            Some(t) => Some(psnr(&t.images[n], x)?),
            None => None,
        };
        rows.push(MetricsRow {
            index: n,
            psnr: p,
            rel_meas_err: result.rel_meas_err[n],
            iters,
        });
    }
    write_metrics_csv(&a.out.join("metrics.csv"), &rows)?;
    write_trace_csv(&a.out.join("trace.csv"), &result.trace)?;
    if let Some(t) = &a.truth {
        manifest.path("truth", t);
        manifest.push("truth_start", a.truth_start);
        let mean = rows.iter().filter_map(|r| r.psnr).map(csv_psnr).sum::<f64>() / rows.len() as f64;
        manifest.push("mean_psnr", mean);
        eprintln!("mean PSNR {mean:.2} dB over {} images", rows.len());
    }
    let warnings = cg_warnings(&result.trace);
    manifest.push("images", result.images.len());
    manifest.push("cg_warnings", warnings);
    manifest.path("out", &a.out);
    manifest.write(&a.out.join("manifest.txt"))?;
    check_cg(g, warnings)
}

fn flatten_features(features: &[FeatureSet]) -> Array2<f64> {
    let dim = features.first().map_or(0, |s| s.flatten().len());
    let mut out = Array2::zeros((features.len(), dim));
    for (n, s) in features.iter().enumerate() {
        out.row_mut(n).assign(&ArrayView1::from(&s.flatten()));
    }
    out
}

fn labels_of(d: &Dataset) -> Vec<usize> {
    d.labels
        .as_ref()
        .expect("labels were required at load time")
        .iter()
        .map(|&l| l as usize)
        .collect()
}

/// Features for `data`: sparse codes of the images, or of their measurements
/// when an operator is given.
fn features_for(
    data: &Dataset,
    op: Option<&Arc<SensingOperator>>,
    dict: &ConvDictionary,
    config: &cscfa::cfa::SolverConfig,
) -> Result<LabeledFeatures, CliError> {
    let x = match op {
        Some(op) => {
            let m = MeasurementSet::measure(&data.images, op.clone())?;
            extract_features(FeatureSource::Measurements(&m), dict, config)?
        }
        None => extract_features(FeatureSource::Images(&data.images), dict, config)?,
    };
    Ok(LabeledFeatures::new(x, labels_of(data))?)
}

pub fn classify(g: &GlobalArgs, mut settings: Settings, a: &ClassifyArgs) -> Result<(), CliError> {
    settings.set_opt("matrix", a.matrix.as_deref());
    a.solver.apply(&mut settings);
    a.softmax.apply(&mut settings);
    let softmax = settings.softmax()?;
    for p in a.out.iter().chain(&a.model_out) {
        ensure_parent(p)?;
    }
    let mut manifest = Manifest::new("classify", g, &settings);

    let (train, test) = match (&a.train_features, &a.test_features, &a.images) {
        (Some(tr), Some(te), _) => {
            manifest.path("train_features", tr);
            manifest.path("test_features", te);
            (read_features_csv(tr)?, read_features_csv(te)?)
        }
        (_, _, Some(images)) => {
            let dict_path = a.dict.as_ref().expect("clap enforces --dict with --images");
            let dict = read_dict(dict_path)?;
            let config = settings.solver(g.seed)?;
            let all = load(images, a.labels.as_deref(), true)?;
            let test_start = a.test_start.unwrap_or(a.train_count);
            let train = take(&all, 0, a.train_count)?;
            let test = take(&all, test_start, a.test_count)?;
            let op = match a.csr {
                Some(csr) => Some(build_operator(&settings, csr, pixels(&all.images), g.seed)?),
                None => None,
            };
            manifest.path("images", images);
            manifest.path("dict", dict_path);
            manifest.push("test_start", test_start);
            if let Some(csr) = a.csr {
                manifest.push("csr", csr);
            }
            let tr = features_for(&train, op.as_ref(), &dict, &config)?;
            let te = features_for(&test, op.as_ref(), &dict, &config)?;
            if let Some(prefix) = &a.save_features {
                write_features_csv(&sidecar(prefix, "train.csv"), &tr)?;
                write_features_csv(&sidecar(prefix, "test.csv"), &te)?;
                manifest.path("save_features", prefix);
            }
            (tr, te)
        }
        _ => return Err(CliError::Usage("give --train-features/--test-features or --images/--dict".into())),
    };
    if train.dim() != test.dim() {
        return Err(CliError::Usage(format!(
            "train features have {} columns, test features {}",
            train.dim(),
            test.dim()
        )));
    }
    let (model, losses) = softmax_train(&train, &softmax)?;
    let accuracy = model.accuracy(&test)?;
    println!("accuracy {accuracy:.4} ({} train, {} test)", train.len(), test.len());
    if let Some(out) = &a.out {
        let row = ClassificationRow {
            csr: a.csr,
            accuracy,
            n_train: train.len(),
            n_test: test.len(),
            seed: g.seed,
        };
        write_classification_csv(out, &[row])?;
        manifest.path("out", out);
    }
    if let Some(p) = &a.model_out {
        write_file(p, |w| model.write_to(w))?;
        manifest.path("model_out", p);
    }
    manifest.push("n_train", train.len());
    manifest.push("n_test", test.len());
    manifest.push("final_loss", losses.last().copied().unwrap_or(f64::NAN));
    manifest.push("accuracy", accuracy);
    let target = a
        .out
        .as_ref()
        .or(a.model_out.as_ref())
        .map(|p| sidecar(p, "manifest"))
        .unwrap_or_else(|| PathBuf::from("classify.manifest"));
    manifest.write(&target)
}

pub fn benchmark(g: &GlobalArgs, mut settings: Settings, a: &BenchmarkArgs) -> Result<(), CliError> {
    settings.set_opt("matrix", a.matrix.as_deref());
    settings.set_opt("atoms", a.atoms);
    settings.set_opt("kernel", a.kernel.as_deref());
    a.solver.apply(&mut settings);
    a.softmax.apply(&mut settings);
    let config = settings.solver(g.seed)?;
    let softmax = settings.softmax()?;
    let all = load(&a.images, a.labels.as_deref(), true)?;
    let train = take(&all, 0, a.train_count)?;
    let test = take(&all, a.train_count, a.test_count)?;
    ensure_parent(&a.out)?;

    let mut manifest = Manifest::new("benchmark", g, &settings);
    manifest.path("images", &a.images);
    manifest.push("train_count", a.train_count);
    manifest.push("test_count", a.test_count);
    let csr_text: Vec<String> = a.csr_list.iter().map(f64::to_string).collect();
    manifest.push("csr_list", csr_text.join(","));

    let mut warnings = 0;
    let dict = match &a.dict {
        Some(p) => {
            manifest.path("dict", p);
            read_dict(p)?
        }
        None => {
            let atoms: usize = settings.require("atoms")?;
            let kernel = settings.kernel("kernel")?;
            let model = train_cfa(&train.images, atoms, kernel, &config)?;
            warnings += model.cg_warnings();
            model.dictionary
        }
    };
    let coding = cscfa::cfa::SolverConfig { beta: 0.0, ..config.clone() };

    let mut rows = Vec::with_capacity(a.csr_list.len());
    for &csr in &a.csr_list {
        let op = build_operator(&settings, csr, pixels(&all.images), g.seed)?;
        let meas = MeasurementSet::measure(&test.images, op.clone())?;
        let recon = reconstruct_prelearned(&meas, &dict, &coding)?;
        warnings += cg_warnings(&recon.trace);
        let mut total = 0.0;
        for (t, x) in test.images.iter().zip(&recon.images) {
            total += csv_psnr(psnr(t, x)?);
        }
        let mean_psnr = total / test.len() as f64;
        let tr = features_for(&train, Some(&op), &dict, &coding)?;
        let te = LabeledFeatures::new(flatten_features(&recon.features), labels_of(&test))?;
        let (model, _) = softmax_train(&tr, &softmax)?;
        let acc = model.accuracy(&te)?;
        eprintln!("csr {csr}: psnr {mean_psnr:.2} dB, softmax accuracy {acc:.4}");
        rows.push(vec![csr.to_string(), format!("{mean_psnr:.6}"), format!("{acc:.6}")]);
    }
    write_csv(&a.out, &["csr", "psnr", "softmax_acc"], &rows)?;
    manifest.push("cg_warnings", warnings);
    manifest.path("out", &a.out);
    manifest.write(&sidecar(&a.out, "manifest"))?;
    check_cg(g, warnings)
}
