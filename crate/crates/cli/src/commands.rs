//! One function per subcommand. Each writes the resolved config and seed
//! next to its outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fusion_core::analysis::{average_by_layer, count_flops, emit_spectrum, spectrum_report, write_flops_csv, FlopConvention, SpectrumReport};
use fusion_core::backbone::{checkpoint, param_count, Conditioning, Denoiser, Fusion, ModelConfig, ParamCount, NULL_TOKEN};
use fusion_core::data::image::ppm_bytes;
use fusion_core::data::{generate_dataset, load_dataset, parse_caption, save_dataset, tokenize, CaptionedImage};
use fusion_core::diffusion::{
    make_schedule, sample, smoothed, train_loop, DiffusionSchedule, Guidance, MetricLog, PeriodicCheckpoint,
    SampleSpec, TrainCallback, TrainState,
};
use fusion_core::eval::{
    cfg_sweep, count_groups_csv, count_table_csv, evaluate_counts, generate, prompt_grid, sweep_csv, CountResult,
    CountSample, GenerateSpec, SweepRow,
};
use fusion_core::numerics::{RngState, Tensor};

use crate::config::RunConfig;
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Environment variable that re-roots relative output paths.
pub const OUT_ROOT_ENV: &str = "UVIT_FUSION_OUT_ROOT";

pub fn resolve_out(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Creates `dir` and writes `config.toml` and `seed.txt` into it.
pub fn prepare_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    write(&dir.join("seed.txt"), format!("{}\n", cfg.seed).as_bytes())
}

fn schedule(cfg: &RunConfig) -> Result<DiffusionSchedule> {
    Ok(make_schedule(cfg.diffusion.steps, cfg.diffusion.beta_start, cfg.diffusion.beta_end)?)
}

/// Loads a checkpoint, refusing it when its architecture differs from the
/// run config.
pub fn load_checked(cfg: &RunConfig, path: &Path) -> Result<Denoiser<f32>> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let found = checkpoint::peek_config(&bytes)?;
    if found != cfg.model {
        let show = |m: &ModelConfig| toml::to_string(m).unwrap_or_else(|e| format!("<{e}>"));
        return Err(CliError::Usage(format!(
            "checkpoint {} does not match the run config\n--- checkpoint model ---\n{}--- run config model ---\n{}",
            path.display(),
            show(&found),
            show(&cfg.model)
        )));
    }
    Ok(checkpoint::from_bytes(&bytes)?)
}

fn tokenize_prompts(cfg: &RunConfig, prompts: &[String]) -> Result<Vec<Vec<u32>>> {
    prompts
        .iter()
        .map(|p| {
            parse_caption(p)?;
            Ok(tokenize(p, cfg.model.text_len)?)
        })
        .collect()
}

pub fn gen_data(cfg: &RunConfig, n: Option<usize>, out: &Path) -> Result<PathBuf> {
    cfg.require_trainable()?;
    let n = n.unwrap_or(cfg.data.n_train);
    prepare_dir(out, cfg)?;
    let data = generate_dataset(&cfg.data.scene, n, cfg.seed)?;
    let path = out.join("data.bin");
    save_dataset(&path, &cfg.data.scene, &data)?;
    let previews = out.join("previews");
    fs::create_dir_all(&previews).map_err(|e| CliError::io(&previews, e))?;
    let mut captions = String::from("index,caption\n");
    for (i, item) in data.iter().enumerate().take(16) {
        write(&previews.join(format!("{i:04}.ppm")), &ppm_bytes(&item.pixels)?)?;
        let _ = writeln!(captions, "{i},{}", item.caption()?);
    }
    write(&previews.join("captions.csv"), captions.as_bytes())?;
    Ok(path)
}

fn load_training_data(cfg: &RunConfig, path: &Path) -> Result<Vec<CaptionedImage>> {
    let (spec, data) = load_dataset(path)?;
    if spec != cfg.data.scene {
        return Err(CliError::Usage(format!(
            "dataset {} was generated with {spec:?}, run config has {:?}",
            path.display(),
            cfg.data.scene
        )));
    }
    Ok(data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub losses: Vec<f64>,
    /// EMA of the loss with decay 0.99.
    pub smoothed: Vec<f64>,
}

impl TrainSummary {
    /// Smoothed final loss over the mean of the first ten raw losses.
    pub fn loss_ratio(&self) -> f64 {
        let head = &self.losses[..self.losses.len().min(10)];
        let initial = head.iter().sum::<f64>() / head.len() as f64;
        self.smoothed.last().copied().unwrap_or(f64::NAN) / initial
    }
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path, steps: Option<u64>) -> Result<TrainSummary> {
    cfg.require_trainable()?;
    let data = load_training_data(cfg, data)?;
    prepare_dir(out, cfg)?;
    let schedule = schedule(cfg)?;
    let steps = steps.unwrap_or(cfg.train.steps);
    let init = Denoiser::<f32>::new(&cfg.model, &mut RngState::with_stream(cfg.seed, 1))?;
    let state = TrainState::new(init, cfg.seed);

    let mut log = MetricLog::create(&out.join("metrics.csv"))?;
    let mut periodic = PeriodicCheckpoint {
        dir: out.to_path_buf(),
        every: cfg.train.checkpoint_every,
    };
    let mut losses = Vec::with_capacity(steps as usize);
    let mut record = |s: &TrainState, loss: f64, _lr: f64| {
        losses.push(loss);
        if s.step % 100 == 0 {
            log::info!("step {} loss {loss:.5}", s.step);
        }
        Ok(())
    };
    let mut callbacks: [&mut dyn TrainCallback; 3] = [&mut log, &mut periodic, &mut record];
    let state = train_loop(state, &data, &schedule, &cfg.optim, steps, &mut callbacks)?;
    log.flush()?;

    let path = out.join("final.ckpt");
    checkpoint::save(&path, &state.denoiser)?;
    let smooth = smoothed(&losses, 0.99);
    let mut summary = String::from("steps,initial_loss,final_smoothed_loss\n");
    let _ = writeln!(
        summary,
        "{steps},{:.8},{:.8}",
        losses.first().copied().unwrap_or(f64::NAN),
        smooth.last().copied().unwrap_or(f64::NAN)
    );
    write(&out.join("train_summary.csv"), summary.as_bytes())?;
    Ok(TrainSummary {
        checkpoint: path,
        losses,
        smoothed: smooth,
    })
}

pub fn sample_images(
    cfg: &RunConfig,
    ckpt: &Path,
    prompts: &[String],
    n_per_prompt: usize,
    guidance: Guidance,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    cfg.require_trainable()?;
    let d = load_checked(cfg, ckpt)?;
    let tokens = tokenize_prompts(cfg, prompts)?;
    let mut captions = Vec::new();
    let mut names = Vec::new();
    for (p, t) in prompts.iter().zip(&tokens) {
        for _ in 0..n_per_prompt {
            captions.push(t.clone());
            names.push(p.clone());
        }
    }
    if captions.is_empty() {
        return Err(CliError::Usage("nothing to sample: give at least one prompt and n >= 1".into()));
    }
    prepare_dir(out, cfg)?;
    let spec = GenerateSpec {
        n_steps: cfg.sample.n_steps,
        guidance,
        seed: cfg.seed,
        batch: cfg.sample.batch,
    };
    let images = generate(&d, &schedule(cfg)?, &captions, &spec)?;
    let mut index = String::from("index,caption\n");
    let mut written = Vec::with_capacity(images.len());
    for (i, (img, name)) in images.iter().zip(&names).enumerate() {
        let path = out.join(format!("sample_{i:04}.ppm"));
        write(&path, &ppm_bytes(img)?)?;
        let _ = writeln!(index, "{i},{name}");
        written.push(path);
    }
    write(&out.join("samples.csv"), index.as_bytes())?;
    Ok(written)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsRow {
    pub fusion: Fusion,
    pub conditioning: Conditioning,
    pub params: ParamCount,
    pub gflops: f64,
    pub gflops_with_attention: f64,
}

/// FLOPs and parameters of the configured model, or of all four
/// fusion x conditioning settings when `all_settings` is set.
pub fn flops(cfg: &RunConfig, all_settings: bool, out: Option<&Path>) -> Result<Vec<FlopsRow>> {
    let mut settings = vec![(cfg.model.fusion, cfg.model.conditioning)];
    if all_settings {
        settings = vec![
            (Fusion::Early, Conditioning::Concat),
            (Fusion::Intermediate, Conditioning::Concat),
            (Fusion::Early, Conditioning::CrossAttn),
            (Fusion::Intermediate, Conditioning::CrossAttn),
        ];
    }
    if let Some(dir) = out {
        prepare_dir(dir, cfg)?;
    }
    let mut rows = Vec::new();
    for (fusion, conditioning) in settings {
        let mut c = cfg.clone();
        if fusion != c.model.fusion {
            c.set_fusion(fusion);
        }
        c.model.conditioning = conditioning;
        c.model.validate()?;
        let lin = count_flops(&c.model, FlopConvention::LinearOnly);
        let full = count_flops(&c.model, FlopConvention::WithAttentionMatmuls);
        if let Some(dir) = out {
            write_flops_csv(&full, &dir.join(format!("flops_{fusion}_{conditioning}.csv")))?;
        }
        rows.push(FlopsRow {
            fusion,
            conditioning,
            params: param_count(&c.model),
            gflops: lin.gflops(),
            gflops_with_attention: full.gflops(),
        });
    }
    if let Some(dir) = out {
        write(&dir.join("flops_summary.csv"), flops_table(&rows).as_bytes())?;
    }
    Ok(rows)
}

pub fn flops_table(rows: &[FlopsRow]) -> String {
    let mut s = String::from("fusion,conditioning,params,params_image,params_text,gflops,gflops_with_attention\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.3},{:.3}",
            r.fusion, r.conditioning, r.params.total, r.params.image, r.params.text, r.gflops, r.gflops_with_attention
        );
    }
    s
}

/// Samples the attention prompts with capture on and writes the
/// text-to-image spectra.
pub fn analyze_attn(cfg: &RunConfig, ckpt: &Path, prompts: &[String], out: &Path) -> Result<SpectrumReport> {
    cfg.require_trainable()?;
    let d = load_checked(cfg, ckpt)?;
    let prompts = if prompts.is_empty() { &cfg.eval.attn_prompts[..] } else { prompts };
    let captions = tokenize_prompts(cfg, prompts)?;
    if captions.is_empty() {
        return Err(CliError::Usage("no prompts for attention analysis".into()));
    }
    prepare_dir(out, cfg)?;
    let schedule = schedule(cfg)?;
    let mut acc = Vec::new();
    let mut predict = |x: &Tensor<f32>, t: &[usize], c: &[Vec<u32>]| {
        let conditional = c.iter().any(|row| row.iter().any(|&v| v != NULL_TOKEN));
        let (eps, records) = d.predict(x, t, c, conditional)?;
        if conditional {
            acc.extend(records);
            acc = average_by_layer(&acc)?;
        }
        Ok(eps)
    };
    let spec = SampleSpec {
        captions: &captions,
        image_shape: [cfg.model.img_channels, cfg.model.img_size, cfg.model.img_size],
        n_steps: cfg.sample.n_steps,
        guidance: Guidance::Cfg(cfg.sample.omega),
        seed: cfg.seed,
        first_chain: 0,
    };
    sample(&mut predict, &schedule, &spec)?;
    let (report, blocks) = spectrum_report(&acc, cfg.eval.spectrum_k)?;
    emit_spectrum(&report, &blocks, out)?;
    Ok(report)
}

fn samples_csv(samples: &[CountSample]) -> String {
    let mut s = String::from("index,shape,color,prompted,detected\n");
    for (i, c) in samples.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{},{}", c.shape.singular(), c.color.name(), c.prompted, c.detected);
    }
    s
}

/// Samples every `(shape, color, count)` prompt `eval.repeats` times at the
/// configured guidance and scores the object counts.
pub fn eval_count(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<(CountResult, Vec<CountSample>)> {
    cfg.require_trainable()?;
    let d = load_checked(cfg, ckpt)?;
    let prompts = prompt_grid(&cfg.eval.counts, cfg.eval.repeats, cfg.model.text_len)?;
    if prompts.is_empty() {
        return Err(CliError::Usage("eval.counts and eval.repeats give no prompts".into()));
    }
    prepare_dir(out, cfg)?;
    let captions: Vec<Vec<u32>> = prompts.iter().map(|p| p.1.clone()).collect();
    let spec = GenerateSpec {
        n_steps: cfg.sample.n_steps,
        guidance: Guidance::Cfg(cfg.sample.omega),
        seed: cfg.seed,
        batch: cfg.sample.batch,
    };
    let images = generate(&d, &schedule(cfg)?, &captions, &spec)?;
    let samples = evaluate_counts(&images, &prompts)?;
    let result = CountResult::from_samples(&samples)?;
    write(&out.join("count_samples.csv"), samples_csv(&samples).as_bytes())?;
    write(&out.join("count_groups.csv"), count_groups_csv(&result).as_bytes())?;
    write(&out.join("count_table.csv"), count_table_csv(&result).as_bytes())?;
    let summary = format!(
        "n,avg_error,match_ratio\n{},{:.6},{:.6}\n",
        result.n, result.avg_error, result.match_ratio
    );
    write(&out.join("count_summary.csv"), summary.as_bytes())?;
    Ok((result, samples))
}

/// Guidance sweep against a reference drawn from the training
/// distribution (or from `data` when given).
pub fn cfg_sweep_cmd(
    cfg: &RunConfig,
    ckpt: &Path,
    omegas: &[f64],
    data: Option<&Path>,
    out: &Path,
) -> Result<Vec<SweepRow>> {
    cfg.require_trainable()?;
    if omegas.is_empty() {
        return Err(CliError::Usage("no guidance scales to sweep".into()));
    }
    let d = load_checked(cfg, ckpt)?;
    let reference: Vec<Tensor<f32>> = match data {
        Some(p) => load_training_data(cfg, p)?
            .into_iter()
            .take(cfg.eval.n_reference)
            .map(|c| c.pixels)
            .collect(),
        None => generate_dataset(&cfg.data.scene, cfg.eval.n_reference, cfg.seed ^ 0x5eed)?
            .into_iter()
            .map(|c| c.pixels)
            .collect(),
    };
    let prompts = prompt_grid(&cfg.eval.counts, cfg.eval.repeats, cfg.model.text_len)?;
    prepare_dir(out, cfg)?;
    let spec = GenerateSpec {
        n_steps: cfg.sample.n_steps,
        guidance: Guidance::Conditional,
        seed: cfg.seed,
        batch: cfg.sample.batch,
    };
    let (rows, results) = cfg_sweep(&d, &schedule(cfg)?, omegas, &prompts, &reference, &spec)?;
    write(&out.join("cfg_sweep.csv"), sweep_csv(&rows).as_bytes())?;
    for (row, result) in rows.iter().zip(&results) {
        write(
            &out.join(format!("count_groups_omega{}.csv", row.omega)),
            count_groups_csv(result).as_bytes(),
        )?;
    }
    Ok(rows)
}
