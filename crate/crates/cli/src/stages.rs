//! One function per subcommand. Stages communicate only through files in
//! the output directory.

use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use gststream::circuits::{
    build_design, default_max_power, standard_fiducials_and_germs, verify_design, ExperimentDesign,
};
use gststream::data::{simulate_design, write_csv, Observation, ObservationReader, ObservationWriter, StreamHeader};
use gststream::filter::{initialize, run_stream, Checkpoint, FilterConfig, UpdateLogWriter};
use gststream::gauge::{gauge_fixed_truth, model_fogi_basis};
use gststream::mle::{batched_curve, read_curve_csv, write_curve_csv};
use gststream::report::{
    compute_metrics, default_tracked_labels, emit, throughput, write_throughput_csv, MleMarker, ReportInput, Snapshot,
    TrackedParameter,
};
use gststream::{FilterState, FogiBasis, GateSetModel, Observer};
use nalgebra::DVector;

use crate::error::{CliError, CliResult};
use crate::files::{load_fogi, open, read_design, read_model, write_atomic, write_json, Layout};
use crate::{CommonArgs, DesignArgs, FilterArgs, MleArgs, ReportArgs, RunAllArgs, SampleArgs, TruthArgs};

pub fn design(args: &DesignArgs) -> CliResult<()> {
    let layout = Layout::create(&args.common.output_dir)?;
    let model = GateSetModel::standard(args.n)?;
    let fogi = model_fogi_basis(&model)?;
    let max_power = args.max_power.unwrap_or_else(|| default_max_power(args.n));
    let fg = standard_fiducials_and_germs(args.n)?;
    let design = build_design(args.n, &fg, max_power, args.shots, args.seed)?;

    let observer = Observer::new(&model, &fogi);
    let check = verify_design(&design, &observer)?;
    if !check.amplified_complete {
        eprintln!(
            "warning: design observes {} of {} FOGI directions (min singular value {:e})",
            check.rank, check.n_fogi, check.min_singular_value
        );
    }

    write_atomic(&layout.design(), |w| Ok(design.write_jsonl(w)?))?;
    write_json(&layout.fogi(), &fogi.to_file())?;
    println!(
        "design {}: {} circuits, max power {}, {} FOGI / {} gauge directions, rank {}",
        design.design_id,
        design.circuits.len(),
        design.max_power,
        fogi.n_fogi(),
        fogi.n_gauge(),
        check.rank
    );
    Ok(())
}

fn parse_plant(arg: &str, model: &GateSetModel) -> CliResult<(usize, f64)> {
    let (label, value) = arg
        .split_once('=')
        .ok_or_else(|| CliError::validation(format!("--plant expects LABEL=VALUE, got {arg:?}")))?;
    let idx = model
        .param_index(label.trim())
        .ok_or_else(|| CliError::validation(format!("unknown parameter label {label:?}")))?;
    let value: f64 = value
        .trim()
        .parse()
        .map_err(|_| CliError::validation(format!("bad --plant value in {arg:?}")))?;
    Ok((idx, value))
}

pub fn truth(args: &TruthArgs) -> CliResult<()> {
    let layout = Layout::new(&args.common.output_dir)?;
    let design = read_design(&layout.design())?;
    let model = GateSetModel::standard(design.n_qubits)?;
    let fogi = load_fogi(&layout.fogi(), &model)?;
    let (mut x, used_seed) = gauge_fixed_truth(&model, &fogi, args.infidelity, args.coherent_fraction, args.seed)?;

    if !args.plant.is_empty() {
        let planted: Vec<(usize, f64)> = args
            .plant
            .iter()
            .map(|s| parse_plant(s, &model))
            .collect::<CliResult<_>>()?;
        for &(i, v) in &planted {
            x[i] = v;
        }
        x = fogi.from_fogi(&fogi.to_fogi(&x)?)?;
        for &(i, v) in &planted {
            if (x[i] - v).abs() > 1e-12 * v.abs().max(1.0) {
                eprintln!(
                    "warning: {} is not gauge-invariant on its own; stored value {:e}",
                    model.param_labels()[i],
                    x[i]
                );
            }
        }
        if !model.is_cptp(&x)? {
            return Err(CliError::Numerical("planted truth model is not CPTP".into()));
        }
    }

    let infidelity = model.avg_gate_infidelity(&x)?;
    write_json(&layout.model(), &model.to_config(&x, Some(used_seed)))?;
    println!("truth: average gate infidelity {infidelity:e} (seed {used_seed})");
    Ok(())
}

fn check_header(header: &StreamHeader, design: &ExperimentDesign) -> CliResult<()> {
    if header.design_id != design.design_id {
        return Err(CliError::validation(format!(
            "observations belong to design {}, not {}",
            header.design_id, design.design_id
        )));
    }
    if header.shots != design.shots {
        return Err(CliError::validation(format!(
            "observations have {} shots per circuit, design has {}",
            header.shots, design.shots
        )));
    }
    Ok(())
}

pub fn sample(args: &SampleArgs) -> CliResult<()> {
    let layout = Layout::new(&args.common.output_dir)?;
    let design = read_design(&layout.design())?;
    let (model, x, _) = read_model(&layout.model())?;
    if model.n_qubits() != design.n_qubits {
        return Err(CliError::validation("model and design disagree on the qubit count"));
    }
    let fogi = load_fogi(&layout.fogi(), &model)?;
    let observer = Observer::new(&model, &fogi);
    let x_f = fogi.to_fogi(&x)?;
    let observations = simulate_design(&observer, &x_f, &design, args.seed, args.noise_free)?;

    let header = StreamHeader::new(&design, args.seed, args.noise_free);
    write_atomic(&layout.observations(), |w| {
        let mut out = ObservationWriter::new(w, &header)?;
        for o in &observations {
            out.write(o)?;
        }
        out.finish()?;
        Ok(())
    })?;
    write_atomic(&layout.observations_csv(), |w| Ok(write_csv(&observations, w)?))?;
    println!(
        "sample: {} observations of {} shots{}",
        observations.len(),
        design.shots,
        if args.noise_free { " (noise-free)" } else { "" }
    );
    Ok(())
}

/// The standard model, or the one recorded in `model.json` when present,
/// with its truth rates.
fn stage_model(layout: &Layout, design: &ExperimentDesign) -> CliResult<(GateSetModel, Option<DVector<f64>>)> {
    if layout.model().exists() {
        let (model, x, _) = read_model(&layout.model())?;
        if model.n_qubits() != design.n_qubits {
            return Err(CliError::validation("model and design disagree on the qubit count"));
        }
        Ok((model, Some(x)))
    } else {
        Ok((GateSetModel::standard(design.n_qubits)?, None))
    }
}

fn tracked_parameters(labels: &[String], fogi: &FogiBasis, n_qubits: usize) -> CliResult<Vec<TrackedParameter>> {
    let defaults: Vec<String> = default_tracked_labels(n_qubits).into_iter().map(String::from).collect();
    let labels = if labels.is_empty() { &defaults } else { labels };
    Ok(labels
        .iter()
        .map(|l| TrackedParameter::new(fogi, l))
        .collect::<gststream::Result<_>>()?)
}

/// Keeps only header lines and records with `k <= k_max`.
fn truncate_log(path: &Path, k_max: usize, key: impl Fn(&str) -> Option<usize>) -> CliResult<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut text = String::new();
    open(path)?.read_to_string(&mut text)?;
    write_atomic(path, |w| {
        for line in text.lines() {
            if key(line).is_none_or(|k| k <= k_max) {
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    })
}

fn csv_key(line: &str) -> Option<usize> {
    line.split(',').next()?.parse().ok()
}

fn snapshot_key(line: &str) -> Option<usize> {
    serde_json::from_str::<Snapshot>(line).ok().map(|s| s.k)
}

/// Buffers log lines between checkpoints. A commit appends them to the logs
/// and then replaces the checkpoint, so the logs never lag it.
struct CheckpointSink<'a> {
    layout: &'a Layout,
    design_id: String,
    updates: Vec<u8>,
    states: Vec<u8>,
}

impl CheckpointSink<'_> {
    fn commit(&mut self, state: &FilterState) -> gststream::Result<()> {
        append(&self.layout.updates(), &self.updates)?;
        append(&self.layout.states(), &self.states)?;
        self.updates.clear();
        self.states.clear();
        let json = state.to_checkpoint(&self.design_id).to_json()?;
        write_atomic(&self.layout.checkpoint(), |w| {
            w.write_all(json.as_bytes())?;
            w.write_all(b"\n")?;
            Ok(())
        })
        .map_err(|e| gststream::Error::Io(io::Error::other(e.to_string())))
    }
}

fn append(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(bytes)?;
    f.sync_data()
}

pub fn filter(args: &FilterArgs) -> CliResult<()> {
    if args.checkpoint_every == 0 {
        return Err(CliError::validation("--checkpoint-every must be at least 1"));
    }
    let layout = Layout::new(&args.common.output_dir)?;
    let design = read_design(&layout.design())?;
    let (model, x_true) = stage_model(&layout, &design)?;
    let fogi = load_fogi(&layout.fogi(), &model)?;
    let observer = Observer::new(&model, &fogi);
    let tracked = tracked_parameters(&args.track, &fogi, design.n_qubits)?;

    let input: Box<dyn BufRead> = match args.observations.as_deref() {
        Some("-") => Box::new(io::stdin().lock()),
        Some(path) => Box::new(open(Path::new(path))?),
        None => Box::new(open(&layout.observations())?),
    };
    let reader = ObservationReader::new(input)?;
    check_header(reader.header(), &design)?;

    let mut state = match &args.resume {
        Some(path) => {
            let mut text = String::new();
            open(path)?.read_to_string(&mut text)?;
            let cp = Checkpoint::from_json(&text)?;
            if cp.design_id != design.design_id {
                return Err(CliError::validation(format!(
                    "checkpoint belongs to design {}, not {}",
                    cp.design_id, design.design_id
                )));
            }
            if args.covariance.is_some_and(|c| c != cp.config.covariance)
                || args.update.is_some_and(|u| u != cp.config.update)
            {
                return Err(CliError::validation(
                    "filter flags disagree with the checkpoint configuration",
                ));
            }
            if args.rb_r.is_some() {
                eprintln!("warning: --rb-r is ignored when resuming");
            }
            let state = FilterState::from_checkpoint(&cp)?;
            if state.m_f() != fogi.n_fogi() {
                return Err(CliError::validation("checkpoint does not match the FOGI basis"));
            }
            truncate_log(&layout.updates(), state.k, csv_key)?;
            truncate_log(&layout.states(), state.k, snapshot_key)?;
            state
        }
        None => {
            let r = match (args.rb_r, &x_true) {
                (Some(r), _) => r,
                (None, Some(x)) => model.avg_gate_infidelity(x)?,
                (None, None) => {
                    return Err(CliError::validation("--rb-r is required without a truth model"));
                }
            };
            let config = FilterConfig::default()
                .with_covariance(args.covariance.unwrap_or_default())
                .with_update(args.update.unwrap_or_default());
            let state = initialize(r, fogi.n_fogi(), None, config)?;
            write_atomic(&layout.updates(), |w| {
                UpdateLogWriter::new(w, true)?.flush()?;
                Ok(())
            })?;
            let first = Snapshot::capture(&state, "", 0, state.trace_sqrt_p(), &tracked);
            write_atomic(&layout.states(), |w| Ok(first.write_line(w)?))?;
            write_json_checkpoint(&layout.checkpoint(), &state, &design.design_id)?;
            state
        }
    };

    let start_k = state.k;
    let every = args.checkpoint_every;
    let mut sink = CheckpointSink {
        layout: &layout,
        design_id: design.design_id.clone(),
        updates: Vec::new(),
        states: Vec::new(),
    };
    let started = Instant::now();
    let records = run_stream(&observer, &design, reader, &mut state, args.max_steps, |st, rec| {
        let mut log = UpdateLogWriter::new(&mut sink.updates, false)?;
        log.write(rec)?;
        log.flush()?;
        drop(log);
        Snapshot::capture(st, &rec.circuit_id, rec.depth, rec.trace_sqrt_p, &tracked).write_line(&mut sink.states)?;
        if st.k % every == 0 {
            sink.commit(st)?;
        }
        Ok(())
    })?;
    sink.commit(&state)?;

    let elapsed = started.elapsed().as_secs_f64();
    println!(
        "filter: {} updates (k {} -> {}), Tr(P) = {:e}, {:.1} circuits/s",
        records.len(),
        start_k,
        state.k,
        state.trace_p(),
        records.len() as f64 / elapsed.max(1e-9)
    );
    if state.k < design.schedule.len() && args.max_steps.is_none() {
        eprintln!(
            "warning: stream ended after {} of {} circuits",
            state.k,
            design.schedule.len()
        );
    }
    Ok(())
}

fn write_json_checkpoint(path: &Path, state: &FilterState, design_id: &str) -> CliResult<()> {
    let json = state.to_checkpoint(design_id).to_json()?;
    write_atomic(path, |w| {
        w.write_all(json.as_bytes())?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

fn read_observations(path: &Path, design: &ExperimentDesign) -> CliResult<Vec<Observation>> {
    let reader = ObservationReader::new(open(path)?)?;
    check_header(reader.header(), design)?;
    Ok(reader.collect::<gststream::Result<_>>()?)
}

pub fn mle(args: &MleArgs) -> CliResult<()> {
    let layout = Layout::new(&args.common.output_dir)?;
    let design = read_design(&layout.design())?;
    let (model, _) = stage_model(&layout, &design)?;
    let fogi = load_fogi(&layout.fogi(), &model)?;
    let observer = Observer::new(&model, &fogi);
    let observations = read_observations(&layout.observations(), &design)?;
    let boundaries: Vec<usize> = if args.batches.is_empty() {
        design.batches.iter().map(|b| b.power).collect()
    } else {
        args.batches.clone()
    };

    let x0 = DVector::zeros(fogi.n_fogi());
    let curve = batched_curve(&observer, &design, &observations, &boundaries, args.covariance, &x0)?;
    for pt in &curve {
        println!(
            "mle: power {:>3}  {:>5} circuits  objective {:.6e}  {} iterations ({:?})",
            pt.boundary_power, pt.n_circuits, pt.report.objective, pt.report.iterations, pt.report.reason
        );
        if pt.report.failed() {
            return Err(CliError::Numerical(format!(
                "fit at power {} hit a non-finite objective",
                pt.boundary_power
            )));
        }
    }
    write_atomic(&layout.mle_curve(), |w| Ok(write_curve_csv(&curve, fogi.labels(), w)?))
}

/// `(power, stream position after the batch)` for every design batch.
fn batch_ends(design: &ExperimentDesign) -> Vec<(usize, usize)> {
    design
        .batches
        .iter()
        .scan(0, |end, b| {
            *end += b.circuits.len();
            Some((b.power, *end))
        })
        .collect()
}

fn read_wall_times(path: &Path) -> CliResult<Vec<u64>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate().skip(1) {
        let line = line?;
        let t = line
            .rsplit(',')
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::validation(format!("{} line {}: bad wall time", path.display(), i + 1)))?;
        out.push(t);
    }
    Ok(out)
}

pub fn report(args: &ReportArgs) -> CliResult<()> {
    let layout = Layout::new(&args.common.output_dir)?;
    let design = read_design(&layout.design())?;
    let (model, x_true) = stage_model(&layout, &design)?;
    let fogi = load_fogi(&layout.fogi(), &model)?;
    let snapshots = Snapshot::read_all(open(&layout.states())?)?;
    let Some(first) = snapshots.first() else {
        return Err(CliError::validation("filter log is empty"));
    };
    let labels: Vec<String> = first.tracked.iter().map(|t| t.label.clone()).collect();
    let tracked = tracked_parameters(&labels, &fogi, design.n_qubits)?;
    let x_true_f = x_true.as_ref().map(|x| fogi.to_fogi(x)).transpose()?;
    let rows = compute_metrics(&snapshots, x_true_f.as_ref())?;

    let mut markers = Vec::new();
    if layout.mle_curve().exists() {
        let ends = batch_ends(&design);
        for (power, x) in read_curve_csv(open(&layout.mle_curve())?)? {
            let k = ends
                .iter()
                .find(|(p, _)| *p == power)
                .map(|(_, e)| *e)
                .ok_or_else(|| CliError::validation(format!("MLE curve power {power} is not a design batch")))?;
            if x.len() != fogi.n_fogi() {
                return Err(CliError::validation("MLE curve does not match the FOGI basis"));
            }
            markers.push(MleMarker {
                k,
                x: DVector::from_vec(x),
            });
        }
    }

    let input = ReportInput {
        rows: &rows,
        tracked: &tracked,
        x_true: x_true_f.as_ref(),
        mle: &markers,
    };
    let staging = layout.path(".report.tmp");
    let _ = fs::remove_dir_all(&staging);
    let result = (|| -> CliResult<Vec<PathBuf>> {
        let written = emit(&input, &staging, args.format)?;
        let mut moved = Vec::with_capacity(written.len());
        for path in written {
            let rel = path.strip_prefix(&staging).expect("emit writes under its directory");
            let dest = layout.dir.join(rel);
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::rename(&path, &dest)?;
            moved.push(dest);
        }
        Ok(moved)
    })();
    let _ = fs::remove_dir_all(&staging);
    let written = result?;

    if layout.updates().exists() {
        let times = read_wall_times(&layout.updates())?;
        if let Some(tp) = throughput(&times) {
            write_atomic(&layout.throughput(), |w| Ok(write_throughput_csv(&tp, w)?))?;
            println!(
                "report: median {:.1} circuits/s over {} updates (p10 {:.0} us, p90 {:.0} us)",
                tp.median_rate, tp.n, tp.quantiles_us[1], tp.quantiles_us[3]
            );
        }
    }
    if let Some(last) = rows.last() {
        match last.mse {
            Some(mse) => println!(
                "report: k = {}, squared error {:e}, Tr(P) {:e}",
                last.k, mse, last.trace_p
            ),
            None => println!("report: k = {}, Tr(P) {:e}", last.k, last.trace_p),
        }
    }
    println!("report: wrote {} files", written.len());
    Ok(())
}

pub fn run_all(args: &RunAllArgs) -> CliResult<()> {
    let common = CommonArgs {
        output_dir: args.common.output_dir.clone(),
    };
    design(&DesignArgs {
        common: common.clone(),
        n: args.n,
        max_power: args.max_power,
        shots: args.shots,
        seed: args.seed,
    })?;
    truth(&TruthArgs {
        common: common.clone(),
        infidelity: args.infidelity,
        coherent_fraction: args.coherent_fraction,
        seed: args.seed,
        plant: args.plant.clone(),
    })?;
    sample(&SampleArgs {
        common: common.clone(),
        seed: args.seed,
        noise_free: args.noise_free,
    })?;
    filter(&FilterArgs {
        common: common.clone(),
        covariance: Some(args.covariance),
        update: Some(args.update),
        rb_r: args.rb_r,
        resume: None,
        observations: None,
        max_steps: None,
        checkpoint_every: 100,
        track: Vec::new(),
    })?;
    mle(&MleArgs {
        common: common.clone(),
        batches: args.batches.clone(),
        covariance: args.covariance,
    })?;
    report(&ReportArgs {
        common,
        format: args.format,
    })
}
