//! Subcommand bodies. Each reads what it needs from the output directory or
//! the run configuration and writes its artefacts back under it.

use std::fs;
use std::path::{Path, PathBuf};

use uragate_core::analysis::{export_similarity_map, probe_layers};
use uragate_core::corpus::{generate_corpus, load_corpus, save_corpus, Split, SyntheticDocument};
use uragate_core::engine::{train_stage1, train_stage2, LossRow, ModelBundle, Stage2Params};
use uragate_core::evalflops::{evaluate, flops_sweep, write_csv, FlopsModel, MetricsReport};
use uragate_core::model::{planted_backbone, LoraSet};
use uragate_core::numerics::Rng;
use uragate_core::retrieval::{ModuleLora, RetrievalModule};
use uragate_core::{Error, Result};

use crate::config::RunConfig;

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn stage1_manifest(&self) -> PathBuf {
        self.path("stage1").join("model.json")
    }

    fn stage2_manifest(&self) -> PathBuf {
        self.path("stage2").join("model.json")
    }

    /// Documents from `corpus_path` when given, otherwise regenerated.
    fn corpus(&self) -> Result<Vec<SyntheticDocument>> {
        match &self.cfg.corpus_path {
            Some(p) => load_corpus(p),
            None => generate_corpus(&self.cfg.corpus),
        }
    }

    fn split(&self, split: Split) -> Result<Vec<SyntheticDocument>> {
        let docs: Vec<_> = self.corpus()?.into_iter().filter(|d| d.split == split).collect();
        if docs.is_empty() {
            return Err(Error::Invalid(format!("corpus has no {split:?} documents")));
        }
        Ok(docs)
    }

    /// Loads a bundle and applies the command-line model overrides on top of
    /// its stored configuration.
    fn load_bundle(&mut self, default: PathBuf) -> Result<ModelBundle> {
        let path = self.cfg.checkpoint.clone().unwrap_or(default);
        let bundle = ModelBundle::load(&path)?;
        let requested = &self.cfg.engine.model;
        let mut model = bundle.model.clone();
        model.top_k = requested.top_k;
        model.retrieval_layer = requested.retrieval_layer;
        self.cfg.engine.model = model;
        self.cfg.engine.validate()?;
        Ok(bundle)
    }
}

fn progress(stage: &'static str) -> impl FnMut(&LossRow) {
    move |r| {
        eprintln!(
            "{stage} step {} loss_retrieval {:.6} loss_generation {:.6} loss_total {:.6}",
            r.step, r.loss_retrieval, r.loss_generation, r.loss_total
        )
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p)?;
    Ok(())
}

pub fn gen(ctx: &Context) -> Result<()> {
    let docs = generate_corpus(&ctx.cfg.corpus)?;
    save_corpus(&docs, &ctx.path("corpus.jsonl"))?;
    eprintln!("wrote {} documents", docs.len());
    Ok(())
}

/// Builds the planted backbone and trains the retrieval module on it.
pub fn pretrain(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let train = ctx.split(Split::Train)?;
    let weights = planted_backbone(&cfg.engine.model, &cfg.corpus.vocab(), cfg.seed)?;
    let mut module = RetrievalModule::random(&cfg.engine.model, &mut Rng::new(cfg.seed).fork(1));
    let log = train_stage1(&train, &weights, &mut module, &cfg.engine, cfg.seed, &mut progress("stage1"))?;
    write_csv(&ctx.path("loss_stage1.csv"), &log)?;
    let bundle = ModelBundle {
        model: cfg.engine.model.clone(),
        weights,
        module,
        lora: None,
        module_lora: None,
        stage: "stage1".into(),
    };
    ensure_dir(&ctx.path("stage1"))?;
    bundle.save(&ctx.stage1_manifest())
}

/// Trains adapters with the joint loss. With `skip_stage1` the backbone is
/// rebuilt and the module starts from its initialisation instead of a
/// stage-1 checkpoint.
pub fn finetune(ctx: &mut Context) -> Result<()> {
    let start = if ctx.cfg.engine.skip_stage1 {
        let cfg = &ctx.cfg;
        ModelBundle {
            model: cfg.engine.model.clone(),
            weights: planted_backbone(&cfg.engine.model, &cfg.corpus.vocab(), cfg.seed)?,
            module: RetrievalModule::random(&cfg.engine.model, &mut Rng::new(cfg.seed).fork(1)),
            lora: None,
            module_lora: None,
            stage: "init".into(),
        }
    } else {
        let default = ctx.stage1_manifest();
        ctx.load_bundle(default)?
    };
    let (weights, module) = start.merged()?;
    let cfg = &ctx.cfg;
    let train = ctx.split(Split::Train)?;
    let mut root = Rng::new(cfg.seed);
    let mut params = Stage2Params {
        lora: LoraSet::new(&cfg.engine.model, &mut root.fork(2)),
        module_lora: ModuleLora::new(&cfg.engine.model, &mut root.fork(3)),
    };
    let log = train_stage2(
        &train,
        &weights,
        &module,
        &mut params,
        &cfg.engine,
        cfg.seed.wrapping_add(1),
        &mut progress("stage2"),
    )?;
    write_csv(&ctx.path("loss_stage2.csv"), &log)?;
    let bundle = ModelBundle {
        model: cfg.engine.model.clone(),
        weights,
        module,
        lora: Some(params.lora),
        module_lora: Some(params.module_lora),
        stage: "stage2".into(),
    };
    ensure_dir(&ctx.path("stage2"))?;
    bundle.save(&ctx.stage2_manifest())
}

pub fn eval(ctx: &mut Context) -> Result<()> {
    let default = ctx.stage2_manifest();
    let bundle = ctx.load_bundle(default)?;
    let (weights, module) = bundle.merged()?;
    let mut test = ctx.split(Split::Test)?;
    if let Some(n) = ctx.cfg.eval.max_questions {
        test.truncate(n);
    }
    let rows = evaluate(&test, &weights, &module, &ctx.cfg.engine, &ctx.cfg.corpus.vocab())?;
    write_csv(&ctx.path("eval.csv"), &rows)?;
    let report = MetricsReport::from_rows(&rows)?;
    fs::write(ctx.path("metrics.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

/// Layer probes run with pruning disabled regardless of `--mode`.
pub fn analyze(ctx: &mut Context) -> Result<()> {
    let default = ctx.stage2_manifest();
    let bundle = ctx.load_bundle(default)?;
    let (weights, module) = bundle.merged()?;
    let mut test = ctx.split(Split::Test)?;
    let sim_doc = test
        .get(ctx.cfg.analysis.similarity_doc)
        .cloned()
        .ok_or_else(|| Error::Config {
            field: "analysis.similarity_doc".into(),
            reason: format!("test split has {} documents", test.len()),
        })?;
    if let Some(n) = ctx.cfg.analysis.max_questions {
        test.truncate(n);
    }
    let report = probe_layers(&test, &weights, &ctx.cfg.engine)?;
    write_csv(&ctx.path("analysis.csv"), &report.rows)?;
    let map = export_similarity_map(&sim_doc, &weights, &module, &ctx.cfg.engine)?;
    write_csv(&ctx.path("similarity_map.csv"), &map)?;
    for r in &report.rows {
        println!("{}", serde_json::to_string(r)?);
    }
    Ok(())
}

pub fn flops(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let toy = FlopsModel::toy(&cfg.engine.model, cfg.corpus.tokens_per_page, uragate_core::corpus::QUERY_LEN);
    write_csv(&ctx.path("flops_toy.csv"), &flops_sweep(&toy, &cfg.flops.page_counts)?)?;
    let full = flops_sweep(&FlopsModel::full_scale()?, &cfg.flops.full_scale_page_counts)?;
    write_csv(&ctx.path("flops_full_scale.csv"), &full)?;
    for r in &full {
        println!("{}", serde_json::to_string(r)?);
    }
    Ok(())
}
