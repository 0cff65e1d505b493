use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use serde_json::{json, Value};

use ncspoof::attack::{
    rx_reliability_eval, spoof_ber_eval, OracleInference, ParamInference, SpoofReport, SupervisedAdversary,
};
use ncspoof::channel::ChannelKind;
use ncspoof::cyclo::{InterleavedRecordConfig, AMBIGUOUS_CASES};
use ncspoof::dataset::{build, noise_level, write_atomic, Dataset, DatasetConfig, LabelSchema, Source};
use ncspoof::experiments::{
    caf_case, nbiot_dataset, run_sensing, train_latent_model, CafConfig, LatentExperiment,
    Profile, SensingExperiment, SpoofExperiment,
};
use ncspoof::metrics::{
    higgins_metric, kim_metric, latent_map, traversal_metric, FactorMetricConfig, FactorSampler, TraversalConfig,
};
use ncspoof::vae::{VaeModel, Variant};
use ncspoof::waveform::{Modulation, PatternFamily};

use crate::config::*;
use crate::{profile_of, Cli, Command, Failure};

type Outcome<T> = Result<T, Failure>;

/// Shared state of one invocation.
struct Ctx {
    profile: Profile,
    seed: u64,
    dir: PathBuf,
    file: Option<Value>,
}

impl Ctx {
    fn ensure_dir(&self) -> Outcome<()> {
        fs::create_dir_all(&self.dir)
            .with_context(|| format!("creating {}", self.dir.display()))
            .map_err(Failure::Runtime)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Outcome<PathBuf> {
        self.ensure_dir()?;
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        Ok(path)
    }

    fn write_csv(&self, name: &str, header: &str, rows: &[String]) -> Outcome<PathBuf> {
        let mut s = String::from(header);
        s.push('\n');
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        self.write(name, s.as_bytes())
    }

    /// Provenance record: resolved configuration, seed and versions.
    fn provenance<C: Serialize>(&self, command: &str, config: &C, artifacts: &[&str]) -> Outcome<()> {
        let record = json!({
            "command": command,
            "profile": self.profile,
            "seed": self.seed,
            "config": config,
            "artifacts": artifacts,
            "versions": {
                "ncspoof": env!("CARGO_PKG_VERSION"),
                "dataset_schema": ncspoof::dataset::SCHEMA_VERSION,
            },
        });
        let bytes = serde_json::to_vec_pretty(&record).map_err(Failure::runtime)?;
        self.write("run.json", &bytes)?;
        Ok(())
    }
}

pub fn dispatch(cli: &Cli) -> Outcome<PathBuf> {
    let g = &cli.global;
    let file = match &g.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(Failure::Validation)?;
            Some(
                serde_json::from_str::<Value>(&text)
                    .with_context(|| format!("parsing {}", p.display()))
                    .map_err(Failure::Validation)?,
            )
        }
        None => None,
    };
    let profile = profile_of(g, file.as_ref())?;
    let seed = seed_of(g.seed, file.as_ref())?;
    if let Some(t) = g.threads {
        if t == 0 {
            return Err(Failure::validation(anyhow!("--threads must be positive")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(Failure::runtime)?;
    }
    let ctx = Ctx {
        profile,
        seed,
        dir: g.out.join(cli.command.name()),
        file,
    };
    let f = ctx.file.as_ref();
    match &cli.command {
        Command::Gen(fl) => gen(&ctx, resolve(&GenConfig::defaults(profile), f, fl)?),
        Command::Caf(fl) => caf(&ctx, resolve(&CafCliConfig::defaults(profile), f, fl)?),
        Command::TrainSupervised(fl) => {
            train_supervised(&ctx, resolve(&SupervisedCliConfig::defaults(profile), f, fl)?)
        }
        Command::TrainVae(fl) => train_vae(&ctx, resolve(&VaeCliConfig::defaults(profile), f, fl)?),
        Command::Sense(fl) => sense(&ctx, resolve(&SenseConfig::defaults(profile), f, fl)?),
        Command::Metrics(fl) => metrics(&ctx, resolve(&MetricsConfig::defaults(profile), f, fl)?),
        Command::Traverse(fl) => traverse(&ctx, resolve(&TraverseConfig::defaults(profile), f, fl)?),
        Command::SpoofEval(fl) => link_eval(&ctx, resolve(&LinkConfig::defaults(profile), f, fl)?, false),
        Command::RxEval(fl) => link_eval(&ctx, resolve(&LinkConfig::defaults(profile), f, fl)?, true),
    }?;
    Ok(ctx.dir)
}

fn family(name: &str, q: usize, prob: f64) -> Outcome<PatternFamily> {
    Ok(match name {
        "ofdm" => PatternFamily::Ofdm,
        "interleaved" => PatternFamily::Interleaved { q },
        "pattern1" => PatternFamily::Pattern1,
        "pattern2" => PatternFamily::Pattern2,
        "random" => PatternFamily::Random { prob },
        "structured" => PatternFamily::three_case_structured(),
        other => return Err(Failure::validation(anyhow!("unknown pattern {other:?}"))),
    })
}

fn channel(name: &str) -> Outcome<ChannelKind> {
    Ok(match name {
        "awgn" => ChannelKind::Awgn,
        "multipath" => ChannelKind::three_tap(),
        "rayleigh_flat" => ChannelKind::RayleighFlat,
        other => return Err(Failure::validation(anyhow!("unknown channel {other:?}"))),
    })
}

fn gen(ctx: &Ctx, cfg: GenConfig) -> Outcome<()> {
    let mut sources = vec![Source::Signal {
        n_subcarriers: cfg.n,
        delta_f_grid: cfg.delta_f.clone(),
        family: family(&cfg.pattern, cfg.q, cfg.prob)?,
        modulation: cfg.modulation,
    }];
    if cfg.with_noise {
        sources.push(Source::Noise);
    }
    let labels = match cfg.labels.as_str() {
        "occupancy" => LabelSchema::Occupancy { n_max: cfg.n },
        "class" => LabelSchema::Class,
        "none" => LabelSchema::None,
        other => return Err(Failure::validation(anyhow!("unknown label schema {other:?}"))),
    };
    let data = DatasetConfig {
        sources,
        n1: cfg.n1,
        t_s: cfg.t_s,
        snr_db: cfg.snr_db,
        channel: channel(&cfg.channel)?,
        labels,
        rows: cfg.rows,
    };
    data.validate()?;
    let ds = build(&data, ctx.seed)?;
    ds.save(&ctx.dir)?;
    ctx.provenance("gen", &cfg, &["manifest.json", "data.f32le", "labels"])
}

fn caf(ctx: &Ctx, cfg: CafCliConfig) -> Outcome<()> {
    let cases: Vec<(String, _)> = match cfg.case.as_str() {
        "all" => AMBIGUOUS_CASES
            .iter()
            .enumerate()
            .map(|(i, c)| (format!("table1-{}", i + 1), *c))
            .collect(),
        name => {
            let idx = name
                .strip_prefix("table1-")
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|i| (1..=AMBIGUOUS_CASES.len()).contains(i))
                .ok_or_else(|| Failure::validation(anyhow!("unknown case {name:?} (table1-1..3 | all)")))?;
            vec![(name.to_owned(), AMBIGUOUS_CASES[idx - 1])]
        }
    };
    let exp = CafConfig {
        record: InterleavedRecordConfig {
            samples: cfg.samples,
            snr_db: cfg.snr_db,
            ..Default::default()
        },
        max_lag: cfg.max_lag,
        peak_threshold: cfg.peak_threshold,
        seed: ctx.seed,
    };
    let mut artifacts = Vec::new();
    let mut peak_rows = Vec::new();
    for (name, case) in &cases {
        let out = caf_case(*case, &exp)?;
        let rows: Vec<String> = out
            .lags
            .iter()
            .zip(&out.magnitudes)
            .map(|(l, m)| format!("{:e},{m:e}", *l as f64 * exp.record.t_s))
            .collect();
        let file = format!("caf_{name}.csv");
        ctx.write_csv(&file, "tau_seconds,magnitude", &rows)?;
        artifacts.push(file);
        let candidates: Vec<String> = out.candidates.iter().map(|c| format!("{}us/q{}", c.t_u * 1e6, c.q)).collect();
        for p in &out.peaks {
            peak_rows.push(format!(
                "{name},{:e},{},{}",
                *p as f64 * exp.record.t_s,
                out.spacing_s.map(|s| format!("{s:e}")).unwrap_or_default(),
                candidates.join(" ")
            ));
        }
    }
    ctx.write_csv("peaks.csv", "case,tau_seconds,spacing_seconds,ambiguity_set", &peak_rows)?;
    artifacts.push("peaks.csv".into());
    let names: Vec<&str> = artifacts.iter().map(String::as_str).collect();
    ctx.provenance("caf", &cfg, &names)
}

fn train_supervised(ctx: &Ctx, cfg: SupervisedCliConfig) -> Outcome<()> {
    let mut exp = SpoofExperiment::supervised(
        ctx.profile,
        cfg.n,
        family(&cfg.pattern, 1, 0.5)?,
        cfg.modulation,
        cfg.snr_db,
        ctx.seed,
    );
    exp.train_data.rows = cfg.rows;
    for t in [&mut exp.supervised.upper_train, &mut exp.supervised.lower_train] {
        t.steps = cfg.steps;
        t.lr = cfg.lr;
        t.batch_size = cfg.batch_size;
    }
    let train = match &cfg.data {
        Some(dir) => Dataset::load(dir)?,
        None => build(&exp.train_data, ctx.seed)?,
    };
    let test_cfg = DatasetConfig {
        rows: cfg.test_rows,
        ..train.manifest.config.clone()
    };
    let test = build(&test_cfg, ncspoof::rng::derive_seed(ctx.seed, 0x7E57))?;
    let (adv, trace) = SupervisedAdversary::train(&train, &exp.supervised)?;
    let occ = ncspoof::attack::occupancy_error_rate(&adv, &test)?;
    ctx.ensure_dir()?;
    adv.save(&ctx.dir.join("supervised.json"))?;
    let rows: Vec<String> = trace
        .upper_loss
        .iter()
        .zip(&trace.lower_loss)
        .enumerate()
        .map(|(i, (u, l))| format!("{i},{u:e},{l:e}"))
        .collect();
    ctx.write_csv("trace.csv", "step,upper_loss,lower_loss", &rows)?;
    ctx.write_csv("eval.csv", "metric,value", &[format!("occupancy_error,{occ:e}")])?;
    ctx.provenance("train-supervised", &cfg, &["supervised.json", "trace.csv", "eval.csv"])
}

fn latent_experiment(profile: Profile, cfg: &VaeCliConfig, seed: u64) -> Outcome<LatentExperiment> {
    let variant = match cfg.variant.as_str() {
        "plain" => Variant::Plain,
        "beta" => Variant::Beta { beta: cfg.beta },
        "dip" => Variant::Dip {
            lambda_d: cfg.lambda_d,
            lambda_od: cfg.lambda_od,
        },
        "factor" => Variant::Factor { gamma: cfg.gamma },
        other => return Err(Failure::validation(anyhow!("unknown variant {other:?}"))),
    };
    let mut exp = match cfg.experiment.as_str() {
        "structured" => {
            let mut e = LatentExperiment::structured(profile, seed);
            e.variant = variant;
            e
        }
        "random" => LatentExperiment::random(profile, Modulation::Bpsk, variant, seed),
        "random-qam" => LatentExperiment::random(profile, Modulation::Qam16, variant, seed),
        other => return Err(Failure::validation(anyhow!("unknown experiment {other:?}"))),
    };
    if let Some(nz) = cfg.nz {
        exp.arch.nz = nz;
    }
    if let Some(r) = cfg.rows {
        exp.data.rows = r;
    }
    if let Some(s) = cfg.steps {
        exp.train.steps = s;
        exp.warmup_steps = exp.warmup_steps.min(s);
    }
    if let Some(w) = cfg.warmup {
        exp.warmup_steps = w;
    }
    if let Some(snr) = cfg.snr_db {
        exp.data.snr_db = snr;
    }
    exp.train.lr = cfg.lr;
    exp.data.validate()?;
    exp.train.validate()?;
    Ok(exp)
}

fn train_vae(ctx: &Ctx, cfg: VaeCliConfig) -> Outcome<()> {
    let exp = latent_experiment(ctx.profile, &cfg, ctx.seed)?;
    let ds = build(&exp.data, exp.seed)?;
    let (model, trace) = train_latent_model(&exp, &ds)?;
    ctx.ensure_dir()?;
    model.save(&ctx.dir.join("vae.json"))?;
    ctx.write(
        "experiment.json",
        &serde_json::to_vec_pretty(&exp).map_err(Failure::runtime)?,
    )?;
    let rows: Vec<String> = (0..trace.loss.len())
        .map(|i| {
            format!(
                "{i},{:e},{:e},{:e},{:e},{:e}",
                trace.loss[i],
                trace.kl[i],
                trace.recon[i],
                trace.penalty[i],
                trace.discriminator_loss.get(i).copied().unwrap_or(f64::NAN)
            )
        })
        .collect();
    ctx.write_csv("trace.csv", "step,loss,kl,recon,penalty,discriminator_loss", &rows)?;
    ctx.provenance("train-vae", &cfg, &["vae.json", "experiment.json", "trace.csv"])
}

fn load_model(dir: &Option<PathBuf>) -> Outcome<(VaeModel, LatentExperiment)> {
    let dir: &Path = dir
        .as_deref()
        .ok_or_else(|| Failure::validation(anyhow!("--model <dir> is required")))?;
    let model = VaeModel::load(&dir.join("vae.json"))?;
    let path = dir.join("experiment.json");
    let text = fs::read(&path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Validation)?;
    let exp: LatentExperiment = serde_json::from_slice(&text).map_err(|e| Failure::validation(anyhow!(e)))?;
    Ok((model, exp))
}

fn eval_rows(exp: &LatentExperiment, rows: usize) -> Outcome<Dataset> {
    let cfg = DatasetConfig {
        rows,
        ..exp.data.clone()
    };
    Ok(build(&cfg, ncspoof::rng::derive_seed(exp.seed, 0xE7A1))?)
}

fn sense(ctx: &Ctx, cfg: SenseConfig) -> Outcome<()> {
    let mut exp = SensingExperiment::new(ctx.profile, cfg.snr_db, ctx.seed);
    if let Some(r) = cfg.rows {
        exp.data.rows = r;
    }
    if let Some(s) = cfg.steps {
        exp.train.steps = s;
        exp.warmup_steps = exp.warmup_steps.min(s);
    }
    exp.histogram_bins = cfg.bins;
    exp.data.validate()?;
    let out = run_sensing(&exp)?;
    ctx.write_csv(
        "sensing.csv",
        "metric,value",
        &[
            format!("accuracy,{:e}", out.accuracy),
            format!("modes_separated,{}", out.modes_separated),
            format!("noise_cluster_energy,{:e}", out.cluster_energy[0]),
            format!("signal_cluster_energy,{:e}", out.cluster_energy[1]),
        ],
    )?;
    let h = &out.histograms;
    let rows: Vec<String> = (0..h.noise.len())
        .map(|i| format!("{:e},{:e},{},{}", h.edges[i], h.edges[i + 1], h.noise[i], h.signal[i]))
        .collect();
    ctx.write_csv("energy_histogram.csv", "energy_low,energy_high,noise_cluster,signal_cluster", &rows)?;
    ctx.provenance("sense", &cfg, &["sensing.csv", "energy_histogram.csv"])
}

fn factor_sampler(exp: &LatentExperiment) -> Outcome<FactorSampler> {
    let Some(Source::Signal {
        family: PatternFamily::Random { prob },
        modulation,
        ..
    }) = exp.data.sources.first()
    else {
        return Err(Failure::validation(anyhow!(
            "factor metrics need independently occupied subcarriers (a `random` experiment)"
        )));
    };
    let geo = exp.geometry()?;
    let (n0, _) = noise_level(&exp.data, exp.seed)?;
    Ok(FactorSampler {
        n_subcarriers: geo.n_subcarriers,
        delta_f: geo.delta_f,
        n1: exp.data.n1,
        t_s: exp.data.t_s,
        modulation: *modulation,
        prob: *prob,
        n0,
    })
}

fn metrics(ctx: &Ctx, cfg: MetricsConfig) -> Outcome<()> {
    let (model, exp) = load_model(&cfg.model)?;
    let label = model.variant.label();
    let mut rows = Vec::new();
    let x = eval_rows(&exp, cfg.rows)?.to_array();
    for &eps in &cfg.epsilon {
        let mut tc = TraversalConfig::new(eps);
        tc.c = exp.traversal_c;
        tc.k = exp.traversal_k;
        let score = match traversal_metric(&model, x.view(), &tc) {
            Ok(r) => r.s0,
            Err(ncspoof::Error::NoInformativeLatents) => f64::NAN,
            Err(e) => return Err(e.into()),
        };
        rows.push(format!("\"{label}\",traversal,{eps},{score:e}"));
    }
    // Factor-based metrics only apply to independently occupied subcarriers.
    if let Ok(sampler) = factor_sampler(&exp) {
        let fc = FactorMetricConfig {
            train_votes: cfg.votes,
            test_votes: cfg.votes,
            seed: ctx.seed,
            ..Default::default()
        };
        let h = higgins_metric(&model, &sampler, &fc)?;
        let k = kim_metric(&model, &sampler, &fc)?;
        rows.push(format!("\"{label}\",higgins,,{:e}", h.score));
        rows.push(format!("\"{label}\",kim,,{:e}", k.score));
    }
    ctx.write_csv("metrics.csv", "model,metric,epsilon,score", &rows)?;
    ctx.provenance("metrics", &cfg, &["metrics.csv"])
}

fn traverse(ctx: &Ctx, cfg: TraverseConfig) -> Outcome<()> {
    let (model, exp) = load_model(&cfg.model)?;
    let x = eval_rows(&exp, cfg.rows)?.to_array();
    let map = latent_map(&model, x.view(), exp.geometry()?, cfg.c, cfg.k, cfg.epsilon)?;
    let rows: Vec<String> = (0..map.informative.len())
        .map(|j| {
            let join = |v: &[usize]| v.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(" ");
            format!("{j},{},{},{}", map.informative[j], join(&map.subcarriers[j]), join(&map.bins[j]))
        })
        .collect();
    ctx.write_csv("latent_map.csv", "latent,informative,subcarriers,bins", &rows)?;
    let mut summary = String::new();
    let _ = write!(
        summary,
        "informative,{}\nbijective,{}\nreliable,{}\nbaseline_flag_rate,{:e}\n",
        map.informative_count(),
        map.is_bijective(),
        map.reliable,
        map.baseline_flag_rate
    );
    ctx.write("summary.csv", format!("metric,value\n{summary}").as_bytes())?;
    ctx.provenance("traverse", &cfg, &["latent_map.csv", "summary.csv"])
}

fn link_eval(ctx: &Ctx, cfg: LinkConfig, rx: bool) -> Outcome<()> {
    let n1 = if cfg.n <= 16 { 80 } else { 100 };
    let observation = nbiot_dataset(cfg.n, family(&cfg.pattern, 1, 0.5)?, cfg.modulation, cfg.snr_db, n1, 1);
    observation.validate()?;
    let scenario = ncspoof::attack::LinkScenario {
        observation,
        link: channel(&cfg.link)?,
        eb_n0_db: cfg.eb_n0_db.clone(),
        frames: cfg.frames,
        seed: ctx.seed,
    };
    let inference: Box<dyn ParamInference> = if cfg.adversary == "oracle" {
        Box::new(OracleInference)
    } else {
        Box::new(SupervisedAdversary::load(Path::new(&cfg.adversary))?)
    };
    let report: SpoofReport = if rx {
        rx_reliability_eval(&scenario, inference.as_ref())?
    } else {
        spoof_ber_eval(&scenario, inference.as_ref())?
    };
    let rows: Vec<String> = report
        .ber
        .iter()
        .zip(&report.baseline)
        .map(|(p, b)| format!("{},{:e},{:e},{:e},{:e}", p.eb_n0_db, p.ber, p.ci_low, p.ci_high, b.ber))
        .collect();
    ctx.write_csv("ber.csv", "eb_n0_db,ber,ci_low,ci_high,baseline_ber", &rows)?;
    let name = if rx { "rx-eval" } else { "spoof-eval" };
    ctx.provenance(name, &cfg, &["ber.csv"])
}
