use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use evsnn_core::events::{
    integrate_frames, parse_events, slice_by_count, synth_moving_bar, write_events, Direction, EventFormat, FrameClip,
    EVT_MAGIC, FRC_MAGIC,
};
use evsnn_core::network::{Mode, Network};
use evsnn_core::tensor::checkpoint::{self, read_checkpoint, write_checkpoint};
use evsnn_core::training::{evaluate, Sample, TrainConfig, Trainer};
use evsnn_core::Error;

use crate::config::{render, Settings};

pub const LABELS: &str = "labels.csv";
pub const SKIPPED: &str = "skipped.txt";
pub const RESOLVED: &str = "config.resolved";
pub const METRICS: &str = "metrics.log";
pub const FINAL_CKPT: &str = "final.ckpt";

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_labels(dir: &Path) -> Result<Vec<(String, usize)>> {
    let path = dir.join(LABELS);
    let bytes = read(&path)?;
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        let (Some(file), Some(label)) = (rec.get(0), rec.get(1)) else {
            return Err(Error::Validation(format!("{}: row {} needs file,label", path.display(), i + 1)).into());
        };
        let label = label
            .trim()
            .parse()
            .map_err(|_| Error::Validation(format!("{}: row {} has label {label:?}", path.display(), i + 1)))?;
        rows.push((file.trim().to_string(), label));
    }
    Ok(rows)
}

fn write_labels(dir: &Path, rows: &[(String, usize)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["file", "label"])?;
    for (file, label) in rows {
        w.write_record([file.as_str(), &label.to_string()])?;
    }
    write(&dir.join(LABELS), w.into_inner()?)
}

/// Moving-bar clips, half moving right and half left, plus the manifest.
pub fn synth(out: &Path, clips: usize, size: u32, events: usize, seed: u64) -> Result<()> {
    if clips == 0 || !clips.is_multiple_of(2) {
        return Err(Error::Validation(format!("clips must be a positive even number, got {clips}")).into());
    }
    create_dir(out)?;
    let mut rows = Vec::with_capacity(clips);
    for dir in [Direction::Right, Direction::Left] {
        for (stream, d) in synth_moving_bar(size, size, clips / 2, dir, events, seed)? {
            let name = format!("clip_{:04}.evt", rows.len());
            write(&out.join(&name), write_events(&stream, EventFormat::Binary))?;
            rows.push((name, d.label()));
        }
    }
    write_labels(out, &rows)?;
    println!("wrote {clips} clips to {}", out.display());
    Ok(())
}

fn event_format(path: &Path) -> Option<EventFormat> {
    if path.file_name().is_some_and(|n| n == LABELS) {
        return None;
    }
    match path.extension()?.to_str()? {
        "evt" => Some(EventFormat::Binary),
        "csv" => Some(EventFormat::Csv),
        _ => None,
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .with_context(|| format!("listing {}", dir.display()))?;
    paths.sort();
    Ok(paths)
}

/// Integrates every event file in `input` into a `T`-frame `FRC1` clip.
pub fn preprocess(input: &Path, out: &Path, frames: usize, binarize: bool) -> Result<()> {
    if frames == 0 {
        return Err(Error::Validation("frames must be >= 1".into()).into());
    }
    create_dir(out)?;
    let labels = input.join(LABELS).exists().then(|| read_labels(input)).transpose()?;
    let (mut written, mut skipped) = (Vec::new(), Vec::new());
    for path in sorted_entries(input)? {
        let Some(format) = event_format(&path) else { continue };
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let stream = parse_events(&read(&path)?, format).with_context(|| format!("invalid event file {name}"))?;
        if stream.len() < frames {
            eprintln!("warning: {name} has {} events, fewer than {frames} frames; skipped", stream.len());
            skipped.push(name);
            continue;
        }
        let clip = integrate_frames(&stream, &slice_by_count(&stream, frames)?)?;
        let clip = if binarize { clip.binarized() } else { clip };
        let stem = path.file_stem().unwrap().to_string_lossy();
        write(&out.join(format!("{stem}.frc")), clip.to_frc_bytes())?;
        written.push((name, format!("{stem}.frc")));
    }
    let mut list = skipped.join("\n");
    if !list.is_empty() {
        list.push('\n');
    }
    write(&out.join(SKIPPED), list)?;
    if let Some(labels) = labels {
        let rows: Vec<(String, usize)> = labels
            .iter()
            .filter_map(|(file, label)| written.iter().find(|(src, _)| src == file).map(|(_, dst)| (dst.clone(), *label)))
            .collect();
        write_labels(out, &rows)?;
    }
    println!("wrote {} clips, skipped {}", written.len(), skipped.len());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let rows = read_labels(dir)?;
    if rows.is_empty() {
        return Err(Error::Validation(format!("{} lists no clips", dir.join(LABELS).display())).into());
    }
    rows.into_iter()
        .map(|(file, label)| {
            let clip = FrameClip::from_frc_bytes(&read(&dir.join(&file))?).with_context(|| format!("invalid clip {file}"))?;
            Ok(Sample { clip, label })
        })
        .collect()
}

fn resolve(settings: &Settings, data: &[Sample]) -> Result<TrainConfig> {
    let c = &data[0].clip;
    Ok(settings.resolve(Some((c.frames(), c.height(), c.width())))?)
}

/// Trains from scratch, logging one metrics line per epoch.
pub fn train(settings: &Settings, data_dir: &Path, out: &Path) -> Result<()> {
    let data = load_dataset(data_dir)?;
    let cfg = resolve(settings, &data)?;
    create_dir(out)?;
    write(&out.join(RESOLVED), render(&cfg))?;
    let metrics_path = out.join(METRICS);
    let mut metrics = fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    let mut trainer = Trainer::new(cfg.clone())?;
    while !trainer.finished() {
        let report = trainer.run_epoch(&data)?;
        writeln!(metrics, "{report}").with_context(|| format!("writing {}", metrics_path.display()))?;
        println!("{report}");
        let done = report.epoch + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.epochs {
            write(&out.join(format!("epoch_{done:04}.ckpt")), write_checkpoint(&trainer.network().to_checkpoint()))?;
        }
    }
    write(&out.join(FINAL_CKPT), write_checkpoint(&trainer.network().to_checkpoint()))?;
    Ok(())
}

/// Accuracy and confusion table of a checkpoint on a dataset.
pub fn eval(settings: &Settings, checkpoint_path: &Path, data_dir: &Path) -> Result<String> {
    let data = load_dataset(data_dir)?;
    let cfg = resolve(settings, &data)?;
    let entries = read_checkpoint(&read(checkpoint_path)?)
        .with_context(|| format!("invalid checkpoint {}", checkpoint_path.display()))?;
    let mut net = Network::build(&cfg.arch, cfg.seed)?;
    net.load_checkpoint(&entries)
        .with_context(|| format!("{} does not fit the configured architecture", checkpoint_path.display()))?;
    net.set_mode(Mode::Eval);
    Ok(evaluate(&net, &data, &cfg)?.to_string())
}

/// Human-readable summary of an `EVT1`, `FRC1` or `CKPT1` file.
pub fn inspect(path: &Path) -> Result<String> {
    let bytes = read(path)?;
    let mut out = String::new();
    use std::fmt::Write as _;
    if bytes.starts_with(checkpoint::MAGIC) {
        let entries = read_checkpoint(&bytes)?;
        let total: usize = entries.iter().map(|(_, t)| t.len()).sum();
        writeln!(out, "format=CKPT1 tensors={} elements={total}", entries.len())?;
        for (name, t) in &entries {
            writeln!(out, "{name} {:?} {}", t.shape(), t.len())?;
        }
    } else if bytes.starts_with(EVT_MAGIC) {
        let s = parse_events(&bytes, EventFormat::Binary)?;
        let on = s.events().iter().filter(|e| e.p == 1).count();
        write!(out, "format=EVT1 width={} height={} events={}", s.width(), s.height(), s.len())?;
        match s.time_range() {
            Some((t0, t1)) => writeln!(out, " t_range={t0}..{t1} on={on} off={}", s.len() - on)?,
            None => writeln!(out)?,
        }
    } else if bytes.starts_with(FRC_MAGIC) {
        let c = FrameClip::from_frc_bytes(&bytes)?;
        let per_frame: Vec<f64> = (0..c.frames()).map(|k| c.frame(k).iter().sum()).collect();
        let (lo, hi) = per_frame.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &m| (lo.min(m), hi.max(m)));
        writeln!(
            out,
            "format=FRC1 shape=[{}, 2, {}, {}] mass={} frame_mass_min={lo} frame_mass_max={hi}",
            c.frames(),
            c.height(),
            c.width(),
            c.mass()
        )?;
    } else {
        let head = String::from_utf8_lossy(&bytes[..bytes.len().min(5)]).into_owned();
        bail!(Error::Validation(format!("{}: unknown magic {head:?}", path.display())));
    }
    Ok(out)
}
