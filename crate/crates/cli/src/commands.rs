use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use carimorph::deform::DeformRep;
use carimorph::io::write_atomic;
use carimorph::mesh::obj_string;
use carimorph::metrics::{aligned_vertex_rmse, ced_csv, ced_curve, landmark_errors, ErrorReport, ImageError};
use carimorph::synth::{self, PoseRange};
use carimorph::{encode, fit, FitResult, LandmarkMapping, LandmarkSet2D, PoissonSolver, ShapeModel, TriMesh, Vec3};
use log::{info, warn};
use serde_json::{json, Value};

use crate::{summary, CliError, FitArgs, RunConfig};

/// What a command reports: a human-readable text and a JSON summary.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub text: String,
    pub json: Value,
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::validation(format!("{what} {} does not exist", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::validation(format!("{what} {} is not a directory", path.display())))
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(format!("cannot create {}: {e}", path.display())))
}

/// Files in `dir` whose extension is one of `exts`, sorted by name.
fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(format!("cannot read {}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(format!("cannot read {}: {e}", dir.display())))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| exts.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    Ok(write_atomic(path, text.as_bytes())?)
}

/// Runs `f` over `items` on up to `workers` threads; results keep input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every item processed"))
        .collect()
}

pub fn cmd_encode(template: &Path, target: &Path, out: &Path) -> Result<Outcome, CliError> {
    require_file(template, "template")?;
    require_file(target, "target")?;
    let tm = TriMesh::load_obj(template)?;
    let tg = TriMesh::load_obj(target)?;
    if tm.n_vertices() != tg.n_vertices() {
        return Err(CliError::validation(format!(
            "vertex count mismatch: template has {}, target has {}",
            tm.n_vertices(),
            tg.n_vertices()
        )));
    }
    if tm.faces() != tg.faces() {
        warn!("target faces differ from the template; only vertex positions are used");
    }
    let rep = encode(&tm, tg.vertices(), None)?;
    rep.save(out)?;
    let max_r = rep.max_rotation_angle();
    Ok(Outcome {
        text: format!("n_v = {}\nmax |r_i| = {max_r:.6}\nwrote {}", rep.n_vertices(), out.display()),
        json: summary(
            "encode",
            json!({ "n_vertices": rep.n_vertices(), "max_rotation": max_r, "out": out }),
        ),
    })
}

pub fn cmd_decode(template: &Path, input: &Path, out: &Path, anchor: Option<Vec3>) -> Result<Outcome, CliError> {
    require_file(template, "template")?;
    require_file(input, "deformation file")?;
    let tm = TriMesh::load_obj(template)?;
    let rep = DeformRep::load(input)?;
    let anchor = anchor.unwrap_or_else(|| tm.centroid());
    let positions = PoissonSolver::new(&tm)?.decode(&rep, anchor)?;
    write_text(out, &obj_string(&positions, tm.faces()))?;
    Ok(Outcome {
        text: format!("decoded {} vertices\nwrote {}", positions.len(), out.display()),
        json: summary(
            "decode",
            json!({ "n_vertices": positions.len(), "anchor": [anchor.x, anchor.y, anchor.z], "out": out }),
        ),
    })
}

pub fn cmd_build_model(
    template: &Path,
    exemplar_dir: &Path,
    mapping: &Path,
    components: usize,
    out: &Path,
) -> Result<Outcome, CliError> {
    require_file(template, "template")?;
    require_dir(exemplar_dir, "exemplar directory")?;
    require_file(mapping, "mapping file")?;
    let tm = TriMesh::load_obj(template)?;
    let mapping = LandmarkMapping::load(mapping, tm.n_vertices())?;
    let files = list_files(exemplar_dir, &["obj", "dr", "json"])?;
    let mut reps = Vec::with_capacity(files.len());
    for f in &files {
        let rep = if f.extension().is_some_and(|e| e.eq_ignore_ascii_case("obj")) {
            let mesh = TriMesh::load_obj(f)?;
            if mesh.n_vertices() != tm.n_vertices() || mesh.faces() != tm.faces() {
                return Err(CliError::validation(format!(
                    "exemplar {}: connectivity differs from the template",
                    f.display()
                )));
            }
            encode(&tm, mesh.vertices(), None)?
        } else {
            let rep = DeformRep::load(f)?;
            if rep.n_vertices() != tm.n_vertices() {
                return Err(CliError::validation(format!(
                    "exemplar {}: {} vertices, template has {}",
                    f.display(),
                    rep.n_vertices(),
                    tm.n_vertices()
                )));
            }
            rep
        };
        reps.push(rep);
    }
    if reps.len() < 2 {
        return Err(CliError::validation(format!(
            "need at least 2 exemplars, found {} in {}",
            reps.len(),
            exemplar_dir.display()
        )));
    }
    let n = reps.len();
    if components > n - 1 {
        warn!("requested {components} components, clamped to {}", n - 1);
    }
    let model = ShapeModel::build(tm, reps, mapping, components)?;
    model.save(out)?;

    let ev = model.pca().explained_variance();
    let total: f64 = ev.iter().sum();
    let mut text = format!("{n} exemplars, {} components\ncomponent  variance  fraction  cumulative\n", ev.len());
    let mut rows = Vec::with_capacity(ev.len());
    let mut cum = 0.0;
    for (k, v) in ev.iter().enumerate() {
        let frac = if total > 0.0 { v / total } else { 0.0 };
        cum += frac;
        text.push_str(&format!("{k:>9}  {v:>8.4e}  {frac:>8.4}  {cum:>10.4}\n"));
        rows.push(json!({ "component": k, "variance": v, "fraction": frac, "cumulative": cum }));
    }
    text.push_str(&format!("wrote {}", out.display()));
    Ok(Outcome {
        text,
        json: summary(
            "build-model",
            json!({
                "exemplars": n,
                "requested_components": components,
                "components": ev.len(),
                "explained_variance": rows,
                "out": out,
            }),
        ),
    })
}

struct FitOutput {
    result: FitResult,
    predicted: LandmarkSet2D,
    rmse: f64,
}

fn fit_one(model: &ShapeModel, landmarks: &LandmarkSet2D, cfg: &RunConfig) -> Result<FitOutput, CliError> {
    let result = fit(model, landmarks, &cfg.fit)?;
    let predicted = result.predicted_landmarks(model.mapping())?;
    let sse: f64 = predicted
        .points()
        .iter()
        .zip(landmarks.points())
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    let rmse = (sse / landmarks.points().len() as f64).sqrt();
    Ok(FitOutput {
        result,
        predicted,
        rmse,
    })
}

fn write_fit(
    model: &ShapeModel,
    out: &FitOutput,
    mesh: &Path,
    pose: &Path,
    trace: &Path,
    landmarks: Option<&Path>,
) -> Result<(), CliError> {
    write_text(mesh, &obj_string(&out.result.positions, model.template().faces()))?;
    out.result.pose.save(pose)?;
    write_text(trace, &out.result.energy_trace_csv())?;
    if let Some(p) = landmarks {
        out.predicted.save(p)?;
    }
    Ok(())
}

fn fit_json(name: &str, out: &FitOutput) -> Value {
    let trace = &out.result.energy_trace;
    json!({
        "name": name,
        "rmse": out.rmse,
        "iterations": out.result.iterations,
        "converged": out.result.converged,
        "initial_energy": trace.first(),
        "final_energy": trace.last(),
        "monotone": trace.windows(2).all(|w| w[1] <= w[0]),
    })
}

pub fn cmd_fit(args: &FitArgs, cfg: &RunConfig) -> Result<Outcome, CliError> {
    require_file(&args.model, "model")?;
    if !args.landmarks.exists() {
        return Err(CliError::validation(format!(
            "landmarks {} does not exist",
            args.landmarks.display()
        )));
    }
    let model = ShapeModel::load(&args.model)?;

    if args.landmarks.is_dir() {
        let dir = args
            .out_dir
            .as_deref()
            .ok_or_else(|| CliError::validation("--out-dir is required when --landmarks is a directory"))?;
        let files = list_files(&args.landmarks, &["txt"])?;
        // parse everything up front so bad input fails before any fitting
        let inputs: Vec<(String, LandmarkSet2D)> = files
            .iter()
            .map(|f| {
                LandmarkSet2D::load(f)
                    .map(|l| (stem(f), l))
                    .map_err(|e| CliError::from(e).with_context(f))
            })
            .collect::<Result<_, _>>()?;
        create_dir(dir)?;
        info!("fitting {} landmark files on {} workers", inputs.len(), cfg.workers);
        let results = parallel_map(&inputs, cfg.workers, |(name, lm)| {
            let out = fit_one(&model, lm, cfg)?;
            write_fit(
                &model,
                &out,
                &dir.join(format!("{name}.obj")),
                &dir.join(format!("{name}.json")),
                &dir.join(format!("{name}.csv")),
                Some(&dir.join(format!("{name}.txt"))),
            )?;
            Ok::<_, CliError>(out)
        });
        let mut text = String::new();
        let mut items = Vec::with_capacity(results.len());
        let mut total = 0.0;
        for ((name, _), r) in inputs.iter().zip(results) {
            let out = r?;
            text.push_str(&format!(
                "{name}: rmse {:.4} px, {} iterations\n",
                out.rmse, out.result.iterations
            ));
            total += out.rmse;
            items.push(fit_json(name, &out));
        }
        let mean = if items.is_empty() { 0.0 } else { total / items.len() as f64 };
        text.push_str(&format!("{} fits, mean reprojection RMSE {mean:.4} px", items.len()));
        return Ok(Outcome {
            text,
            json: summary("fit", json!({ "fits": items, "mean_rmse": mean, "out_dir": dir })),
        });
    }

    let mesh = args
        .out
        .as_deref()
        .ok_or_else(|| CliError::validation("--out is required for a single landmark file"))?;
    let pose = args.pose_out.clone().unwrap_or_else(|| mesh.with_extension("json"));
    let trace = args.trace_out.clone().unwrap_or_else(|| mesh.with_extension("csv"));
    let landmarks = LandmarkSet2D::load(&args.landmarks)?;
    let out = fit_one(&model, &landmarks, cfg)?;
    write_fit(&model, &out, mesh, &pose, &trace, args.landmarks_out.as_deref())?;
    Ok(Outcome {
        text: format!(
            "final reprojection RMSE {:.4} px after {} iterations (alpha1 {}, alpha2 {})\nwrote {}, {}, {}",
            out.rmse,
            out.result.iterations,
            cfg.fit.alpha1,
            cfg.fit.alpha2,
            mesh.display(),
            pose.display(),
            trace.display()
        ),
        json: summary(
            "fit",
            json!({
                "fit": fit_json(&stem(&args.landmarks), &out),
                "alpha1": cfg.fit.alpha1,
                "alpha2": cfg.fit.alpha2,
                "out": mesh,
                "pose_out": pose,
                "trace_out": trace,
            }),
        ),
    })
}

pub fn cmd_synth(model: &Path, count: usize, seed: u64, out_dir: &Path) -> Result<Outcome, CliError> {
    require_file(model, "model")?;
    let model = ShapeModel::load(model)?;
    create_dir(out_dir)?;
    let samples = synth::samples(&model, count, seed, &PoseRange::default())?;
    for (k, s) in samples.iter().enumerate() {
        let base = out_dir.join(format!("sample_{k:04}"));
        write_text(&base.with_extension("obj"), &obj_string(&s.positions, model.template().faces()))?;
        s.landmarks.save(base.with_extension("txt"))?;
        s.pose.save(base.with_extension("json"))?;
    }
    Ok(Outcome {
        text: format!("wrote {count} samples (seed {seed}) to {}", out_dir.display()),
        json: summary("synth", json!({ "count": count, "seed": seed, "out_dir": out_dir })),
    })
}

pub fn cmd_eval(
    pred: &Path,
    gt: &Path,
    report: &Path,
    ced: &Path,
    ced_max: f64,
    ced_steps: usize,
) -> Result<Outcome, CliError> {
    require_dir(pred, "prediction directory")?;
    require_dir(gt, "ground-truth directory")?;
    if !(ced_max > 0.0 && ced_max.is_finite()) || ced_steps < 2 {
        return Err(CliError::validation("CED needs a positive maximum and at least 2 steps"));
    }
    let by_stem = |dir: &Path| -> Result<BTreeMap<String, PathBuf>, CliError> {
        Ok(list_files(dir, &["txt"])?.into_iter().map(|p| (stem(&p), p)).collect())
    };
    let (p, g) = (by_stem(pred)?, by_stem(gt)?);
    if p.is_empty() && g.is_empty() {
        return Err(CliError::validation("no landmark files in either directory"));
    }
    let unmatched: Vec<String> = p
        .keys()
        .filter(|k| !g.contains_key(*k))
        .map(|k| format!("{k} (prediction only)"))
        .chain(g.keys().filter(|k| !p.contains_key(*k)).map(|k| format!("{k} (ground truth only)")))
        .collect();
    if !unmatched.is_empty() {
        return Err(CliError::validation(format!("unmatched files: {}", unmatched.join(", "))));
    }

    let mut images = Vec::with_capacity(p.len());
    for (name, pp) in &p {
        let pl = LandmarkSet2D::load(pp).map_err(|e| CliError::from(e).with_context(pp))?;
        let gp = &g[name];
        let gl = LandmarkSet2D::load(gp).map_err(|e| CliError::from(e).with_context(gp))?;
        let (pm, gm) = (pred.join(format!("{name}.obj")), gt.join(format!("{name}.obj")));
        let vertex_rmse = if pm.is_file() && gm.is_file() {
            let a = TriMesh::load_obj(&pm)?;
            let b = TriMesh::load_obj(&gm)?;
            Some(aligned_vertex_rmse(a.vertices(), b.vertices())?)
        } else {
            None
        };
        images.push(ImageError {
            name: name.clone(),
            errors: landmark_errors(&pl, &gl),
            vertex_rmse,
        });
    }
    let rep = ErrorReport::from_images(images)?;
    let thresholds: Vec<f64> = (0..ced_steps).map(|k| ced_max * k as f64 / (ced_steps - 1) as f64).collect();
    let curve = ced_curve(&rep.mean_errors(), &thresholds)?;
    let report_json = serde_json::to_string_pretty(&rep).map_err(|e| CliError::validation(e.to_string()))?;
    write_text(report, &report_json)?;
    write_text(ced, &ced_csv(&curve))?;

    let mut text = format!(
        "{} images\nmean error        {:.4} px\nNME inter-pupil   {:.4} %\nNME inter-ocular  {:.4} %\nNME bbox diagonal {:.4} %\n",
        rep.images.len(),
        rep.mean_error,
        rep.nme_interpupil,
        rep.nme_interocular,
        rep.nme_diagonal
    );
    if let Some(v) = rep.vertex_rmse {
        text.push_str(&format!("3D RMSE / diag    {v:.6}\n"));
    }
    text.push_str(&format!("wrote {}, {}", report.display(), ced.display()));
    Ok(Outcome {
        text,
        json: summary(
            "eval",
            json!({
                "images": rep.images.len(),
                "mean_error": rep.mean_error,
                "nme_interpupil": rep.nme_interpupil,
                "nme_interocular": rep.nme_interocular,
                "nme_diagonal": rep.nme_diagonal,
                "vertex_rmse": rep.vertex_rmse,
                "report": report,
                "ced": ced,
            }),
        ),
    })
}

pub fn cmd_demo_data(out_dir: &Path, cols: usize, rows: usize, n: usize, seed: u64) -> Result<Outcome, CliError> {
    let (template, mapping) = synth::head_template(cols, rows)?;
    let ex_dir = out_dir.join("exemplars");
    create_dir(&ex_dir)?;
    template.save_obj(out_dir.join("template.obj"))?;
    mapping.save(out_dir.join("mapping.json"))?;
    for k in 0..n {
        let v = synth::smooth_deformation(template.vertices(), seed.wrapping_add(k as u64));
        write_text(&ex_dir.join(format!("exemplar_{k:03}.obj")), &obj_string(&v, template.faces()))?;
    }
    Ok(Outcome {
        text: format!(
            "template with {} vertices, {n} exemplars written to {}",
            template.n_vertices(),
            out_dir.display()
        ),
        json: summary(
            "demo-data",
            json!({ "n_vertices": template.n_vertices(), "exemplars": n, "seed": seed, "out_dir": out_dir }),
        ),
    })
}

impl CliError {
    fn with_context(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}
