use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};
use store_core::attention::{attention_flops, FlopCount};
use store_core::data::{
    gen_synthetic, read_avazu_csv, read_embeddings, Dataset, DatasetSchema, EmbeddingTable, ReadOptions,
    Vocabulary,
};
use store_core::model::{
    fit, model_forward_madds, training_flops_per_batch, AttentionKind, EpochRecord, ItemLookup, StoreModel,
    TrainOptions,
};
use store_core::tokenizer::{
    read_sid_table, tokenize_catalog, train_opmq, train_rq_baseline, write_sid_table, OpmqModel, SidTable,
};

use crate::config::{DataFormat, RunConfig, TokenizerKind};

pub const MODEL_MAGIC: &str = "STORE1";

pub struct LoadedData {
    pub train: Dataset,
    pub val: Dataset,
    pub vocab: Option<Vocabulary>,
    pub embeddings: Option<EmbeddingTable>,
}

/// Column layout of a `gen-synthetic` file, from its header.
pub fn synthetic_schema(path: &Path) -> Result<DatasetSchema> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let header = text.lines().next().ok_or_else(|| anyhow!("{} is empty", path.display()))?;
    let n_static = header.split(',').filter(|c| c.starts_with('f')).count();
    Ok(DatasetSchema::synthetic(n_static))
}

fn schema_for(cfg: &RunConfig, path: &Path) -> Result<DatasetSchema> {
    Ok(match cfg.data.format {
        DataFormat::Synthetic => synthetic_schema(path)?,
        DataFormat::Avazu => cfg.data.schema.clone().unwrap_or_else(DatasetSchema::avazu),
    })
}

pub fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    let opts = ReadOptions {
        skip_malformed: cfg.data.skip_malformed,
    };
    let embeddings = cfg.data.embeddings.as_deref().map(read_embeddings).transpose()?;
    match &cfg.data.path {
        Some(path) => {
            let schema = schema_for(cfg, path)?;
            let (train, val, vocab) = match cfg.data.format {
                DataFormat::Synthetic => {
                    Vocabulary::load_random_split(path, &schema, cfg.data.val_fraction, cfg.model.seed, opts)?
                }
                DataFormat::Avazu => Vocabulary::load_split(path, &schema, cfg.data.val_fraction, opts)?,
            };
            Ok(LoadedData {
                train,
                val,
                vocab: Some(vocab),
                embeddings,
            })
        }
        None => {
            let data = gen_synthetic(&cfg.synthetic)?;
            let (train, val) = data.dataset.split_random(cfg.data.val_fraction, cfg.model.seed);
            Ok(LoadedData {
                train,
                val,
                vocab: None,
                embeddings: Some(embeddings.unwrap_or(data.embeddings)),
            })
        }
    }
}

/// Embeddings for tokenizer training: the configured file, or the
/// in-memory synthetic table.
pub fn load_embeddings(cfg: &RunConfig) -> Result<EmbeddingTable> {
    match &cfg.data.embeddings {
        Some(p) => Ok(read_embeddings(p)?),
        None if cfg.data.path.is_none() => Ok(gen_synthetic(&cfg.synthetic)?.embeddings),
        None => bail!("data.embeddings is required to train a tokenizer on a click-log file"),
    }
}

/// Semantic IDs or raw-id rows for the run, plus anything trained on the way.
pub struct Tokens {
    pub lookup: ItemLookup,
    pub sids: Option<SidTable>,
    pub opmq: Option<OpmqModel>,
    /// One JSON line per tokenizer training epoch or residual stage.
    pub log: Vec<String>,
}

pub fn resolve_tokens(cfg: &RunConfig, data: &LoadedData) -> Result<Tokens> {
    let t = &cfg.tokenizer;
    let mut opmq = None;
    let mut log = Vec::new();
    let sids = match t.kind {
        TokenizerKind::RawId => {
            return Ok(Tokens {
                lookup: ItemLookup::raw_ids(&data.train, data.train.item_keys.len()),
                sids: None,
                opmq: None,
                log,
            })
        }
        _ if t.sids.is_some() => read_sid_table(t.sids.as_deref().unwrap())?,
        TokenizerKind::Opmq => {
            let emb = data
                .embeddings
                .as_ref()
                .ok_or_else(|| anyhow!("item embeddings are required for semantic ids"))?;
            let model = match &t.model {
                Some(p) => OpmqModel::read(p)?,
                None => {
                    info!("training OPMQ tokenizer on {} items", emb.len());
                    let (m, l) = train_opmq(emb, &t.opmq)?;
                    for e in &l.epochs {
                        log.push(serde_json::to_string(e)?);
                    }
                    m
                }
            };
            let table = tokenize_catalog(emb, &model)?;
            opmq = Some(model);
            table
        }
        TokenizerKind::Rq => {
            let emb = data
                .embeddings
                .as_ref()
                .ok_or_else(|| anyhow!("item embeddings are required for semantic ids"))?;
            let (table, model) = train_rq_baseline(emb, &t.rq)?;
            for (stage, sse) in model.residual_sse.iter().enumerate() {
                log.push(serde_json::to_string(&serde_json::json!({ "stage": stage, "residual_sse": sse }))?);
            }
            table
        }
    };
    if sids.k() != cfg.model.h {
        bail!("sid table has {} codes per item but model.h is {}", sids.k(), cfg.model.h);
    }
    if sids.v() > cfg.model.v {
        bail!("sid table codebook size {} exceeds model.v {}", sids.v(), cfg.model.v);
    }
    Ok(Tokens {
        lookup: ItemLookup::from_sids(&sids, &data.train.item_keys)?,
        sids: Some(sids),
        opmq,
        log,
    })
}

/// Saved ranking model with everything needed to score new rows.
#[derive(Serialize, Deserialize)]
pub struct TrainedModel {
    pub format: String,
    pub model: StoreModel,
    pub vocab: Option<Vocabulary>,
    /// Item key to raw-id embedding row.
    pub raw_id_rows: Option<BTreeMap<String, usize>>,
    pub sids: Option<BTreeMap<String, Vec<u16>>>,
}

impl TrainedModel {
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading model {}", path.display()))?;
        let m: Self = serde_json::from_str(&text).with_context(|| format!("parsing model {}", path.display()))?;
        if m.format != MODEL_MAGIC {
            bail!("{} is not a {MODEL_MAGIC} model", path.display());
        }
        Ok(m)
    }

    /// Item lookup for a dataset whose item keys may differ from training.
    pub fn lookup_for(&self, ds: &Dataset) -> Result<ItemLookup> {
        if let Some(rows) = &self.raw_id_rows {
            let table_rows = rows.values().max().map_or(1, |m| m + 1);
            let rows = ds.item_keys.iter().map(|k| rows.get(k).copied().unwrap_or(0)).collect();
            return Ok(ItemLookup::RawIds { rows, table_rows });
        }
        let sids = self.sids.as_ref().ok_or_else(|| anyhow!("model has neither sids nor raw-id rows"))?;
        let h = self.model.cfg.h;
        let mut codes = Vec::with_capacity(ds.item_keys.len() * h);
        for k in &ds.item_keys {
            let c = sids.get(k).ok_or_else(|| anyhow!("item {k} has no semantic id"))?;
            codes.extend_from_slice(c);
        }
        Ok(ItemLookup::Sids { h, codes })
    }
}

/// Encodes every row of `path` with the model's vocabulary.
pub fn encode_file(cfg: &RunConfig, path: &Path, vocab: &Vocabulary) -> Result<Dataset> {
    let schema = schema_for(cfg, path)?;
    let raw = read_avazu_csv(
        path,
        &schema,
        ReadOptions {
            skip_malformed: cfg.data.skip_malformed,
        },
    )?;
    let mut vocab = vocab.clone();
    Ok(vocab.encode(&raw, 0..raw.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsRecord {
    pub forward_madds_per_instance: u64,
    pub flops_per_batch: u64,
    pub vanilla_forward_madds_per_instance: u64,
    pub k_blocks: usize,
    pub attention_layer: FlopCount,
}

pub fn flops_record(model: &StoreModel) -> Result<FlopsRecord> {
    let cfg = &model.cfg;
    let groups: Vec<(usize, usize)> = model
        .fusion
        .mlps
        .iter()
        .map(|m| (m.in_dim(&model.store), m.out_dim(&model.store)))
        .collect();
    let fwd = model_forward_madds(cfg, &groups)?;
    let mut vanilla = cfg.clone();
    vanilla.attention = AttentionKind::Vanilla;
    Ok(FlopsRecord {
        forward_madds_per_instance: fwd,
        flops_per_batch: training_flops_per_batch(fwd, cfg.batch_size),
        vanilla_forward_madds_per_instance: model_forward_madds(&vanilla, &groups)?,
        k_blocks: cfg.k_blocks(),
        attention_layer: attention_flops(cfg.h, cfg.d, cfg.n_heads, cfg.block_size, cfg.k_blocks(), true)?,
    })
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    pub flops: FlopsRecord,
}

/// Full training run: data, tokens, model, epoch log and artifacts in `out`.
pub fn train_run(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;
    let data = load_data(cfg)?;
    let tokens = resolve_tokens(cfg, &data)?;
    if let Some(m) = &tokens.opmq {
        if cfg.tokenizer.model.is_none() {
            m.write(&out.join("tokenizer.opmq"))?;
        }
    }
    if !tokens.log.is_empty() {
        write_lines(&out.join("tokenizer_log.jsonl"), &tokens.log)?;
    }
    if let (Some(s), None) = (&tokens.sids, &cfg.tokenizer.sids) {
        write_sid_table(s, &out.join("sids.csv"))?;
    }
    let table_rows = match &tokens.lookup {
        ItemLookup::RawIds { table_rows, .. } => *table_rows,
        ItemLookup::Sids { .. } => 0,
    };
    let mut model = StoreModel::new(&cfg.model, &data.train.static_names, &data.train.static_cards, table_rows)?;
    let opts = TrainOptions {
        max_steps: cfg.train.max_steps,
        eval_batch: cfg.train.eval_batch,
    };
    let report = fit(&mut model, &data.train, &data.val, &tokens.lookup, &opts)?;
    let lines = report
        .epochs
        .iter()
        .map(serde_json::to_string)
        .collect::<Result<Vec<_>, _>>()?;
    write_lines(&out.join("epoch_log.jsonl"), &lines)?;
    let flops = flops_record(&model)?;
    fs::write(out.join("flops.json"), serde_json::to_string_pretty(&flops)?)?;

    let raw_id_rows = match &tokens.lookup {
        ItemLookup::RawIds { rows, .. } => Some(
            data.train
                .item_keys
                .iter()
                .zip(rows)
                .filter(|(_, &r)| r > 0)
                .map(|(k, &r)| (k.clone(), r))
                .collect(),
        ),
        ItemLookup::Sids { .. } => None,
    };
    let sids = tokens.sids.as_ref().map(|s| {
        s.ids()
            .iter()
            .enumerate()
            .map(|(r, id)| (id.clone(), s.codes(r).to_vec()))
            .collect()
    });
    TrainedModel {
        format: MODEL_MAGIC.into(),
        model,
        vocab: data.vocab,
        raw_id_rows,
        sids,
    }
    .write(&out.join("model.json"))?;
    Ok(TrainOutcome {
        epochs: report.epochs,
        flops,
    })
}
