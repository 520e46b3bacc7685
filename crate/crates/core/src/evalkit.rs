//! Cross-modality retrieval evaluation.

use std::fmt::Write as _;

use crate::error::{ensure, Error, Result};
use crate::model::{Forward, Params};
use crate::pipeline::complete_feature;
use crate::synthdata::{Modality, Split, SynthDataset};
use crate::tensor::{BnMode, Tape, Tensor};
use crate::trainer::{Checkpoint, TrainConfig};

/// Images per forward pass. Fixed so that results never depend on how
/// many threads share the work.
const CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchMode {
    VisibleToInfrared,
    InfraredToVisible,
}

impl SearchMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "v2i" | "visible-to-infrared" => Ok(SearchMode::VisibleToInfrared),
            "i2v" | "infrared-to-visible" => Ok(SearchMode::InfraredToVisible),
            _ => Err(Error::Config(format!("unknown search mode {s:?} (expected v2i or i2v)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SearchMode::VisibleToInfrared => "v2i",
            SearchMode::InfraredToVisible => "i2v",
        }
    }

    pub fn query_modality(self) -> Modality {
        match self {
            SearchMode::VisibleToInfrared => Modality::Visible,
            SearchMode::InfraredToVisible => Modality::Infrared,
        }
    }
}

/// L2-normalized embeddings with their identities and modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    /// `[M, D]`
    pub vectors: Tensor,
    pub labels: Vec<usize>,
    pub modalities: Vec<Modality>,
}

impl EmbeddingSet {
    pub fn new(vectors: Tensor, labels: Vec<usize>, modalities: Vec<Modality>) -> Result<Self> {
        ensure!(vectors.ndim() == 2, "embeddings must be [M, D]");
        ensure!(
            labels.len() == vectors.shape()[0] && modalities.len() == labels.len(),
            "embedding rows, labels and modalities disagree"
        );
        Ok(EmbeddingSet {
            vectors,
            labels,
            modalities,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.data()[i * d..(i + 1) * d]
    }

    /// CSV with columns `id, modality, v_1..v_D`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,modality");
        for j in 1..=self.dim() {
            write!(s, ",v_{j}").expect("string write");
        }
        s.push('\n');
        for i in 0..self.len() {
            write!(s, "{},{}", self.labels[i], self.modalities[i].as_str()).expect("string write");
            for v in self.row(i) {
                write!(s, ",{v}").expect("string write");
            }
            s.push('\n');
        }
        s
    }
}

/// Rows scaled to unit Euclidean norm (zero rows stay zero).
pub fn l2_normalize(x: &Tensor) -> Tensor {
    let d = x.shape()[1];
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Worker count from `TMPA_THREADS` (default 1).
pub fn threads_from_env() -> usize {
    std::env::var("TMPA_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

fn embed_chunk(params: &Params, cfg: &TrainConfig, images: Tensor, modality: Modality) -> Tensor {
    let mut tape = Tape::new();
    let mut stats = params.stats.clone();
    let mut fwd = Forward::from_parts(&mut tape, &params.tensors, &mut stats, BnMode::Eval);
    let x = fwd.tape.constant(images);
    let f_c = complete_feature(&mut fwd, x, modality, cfg.enable_mft, &cfg.weights);
    let pooled = fwd.tape.global_avg_pool(f_c);
    tape.value(pooled).clone()
}

/// Eval-mode embeddings of `[M,3,H,W]` images that all come from `modality`.
pub fn embed_with(
    params: &Params,
    cfg: &TrainConfig,
    images: &Tensor,
    modality: Modality,
    threads: usize,
) -> Tensor {
    assert!(
        images.ndim() == 4 && images.shape()[1] == 3,
        "contract violation: embed expects [M,3,H,W], got {:?}",
        images.shape()
    );
    let m = images.shape()[0];
    let starts: Vec<usize> = (0..m).step_by(CHUNK).collect();
    let run = |s: usize| embed_chunk(params, cfg, images.slice_outer(s, CHUNK.min(m - s)), modality);
    let parts: Vec<Tensor> = if threads <= 1 || starts.len() <= 1 {
        starts.iter().map(|&s| run(s)).collect()
    } else {
        let per = starts.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = starts
                .chunks(per)
                .map(|group| scope.spawn(|| group.iter().map(|&s| run(s)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("embedding worker panicked"))
                .collect()
        })
    };
    l2_normalize(&Tensor::stack_outer(&parts.iter().collect::<Vec<_>>()))
}

/// Embeddings of `images` under the checkpoint's own configuration.
pub fn embed(ck: &Checkpoint, images: &Tensor, labels: &[usize], modality: Modality) -> Result<EmbeddingSet> {
    let cfg = ck.train_config()?;
    let v = embed_with(&ck.params, &cfg, images, modality, threads_from_env());
    EmbeddingSet::new(v, labels.to_vec(), vec![modality; labels.len()])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// `cmc[k-1]`: fraction of queries whose first correct match is at rank <= k.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub mode: SearchMode,
}

impl Metrics {
    /// CMC at rank `k` (1-based); ranks past the gallery size saturate.
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[(k.max(1) - 1).min(self.cmc.len() - 1)]
    }
}

/// Gallery indices sorted by ascending distance to `q`, ties by index.
pub fn ranking(q: &[f64], gallery: &EmbeddingSet) -> Vec<usize> {
    let dist: Vec<f64> = (0..gallery.len())
        .map(|j| {
            q.iter()
                .zip(gallery.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    order
}

/// Average precision of one ranked list: the mean over correct matches of
/// the precision at each correct match's rank.
pub fn average_precision(hits: &[bool]) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (r, &h) in hits.iter().enumerate() {
        if h {
            found += 1;
            sum += found as f64 / (r + 1) as f64;
        }
    }
    if found == 0 {
        0.0
    } else {
        sum / found as f64
    }
}

/// CMC curve over all gallery ranks and mAP.
pub fn cmc_map(query: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<Metrics> {
    ensure!(!query.is_empty() && !gallery.is_empty(), "empty query or gallery");
    ensure!(query.dim() == gallery.dim(), "query/gallery dimensions differ");
    let qm = query.modalities[0];
    ensure!(
        query.modalities.iter().all(|&m| m == qm) && gallery.modalities.iter().all(|&m| m == qm.other()),
        "cross-modality search needs a single-modality query set and an opposite-modality gallery"
    );
    let mode = match qm {
        Modality::Visible => SearchMode::VisibleToInfrared,
        Modality::Infrared => SearchMode::InfraredToVisible,
    };
    let g = gallery.len();
    let mut first_hit = vec![0usize; g];
    let mut ap_sum = 0.0;
    for i in 0..query.len() {
        let y = query.labels[i];
        ensure!(gallery.labels.contains(&y), "query identity {y} is absent from the gallery");
        let hits: Vec<bool> = ranking(query.row(i), gallery)
            .into_iter()
            .map(|j| gallery.labels[j] == y)
            .collect();
        first_hit[hits.iter().position(|&h| h).expect("identity present")] += 1;
        ap_sum += average_precision(&hits);
    }
    let nq = query.len() as f64;
    let mut acc = 0usize;
    let cmc = first_hit
        .iter()
        .map(|&c| {
            acc += c;
            acc as f64 / nq
        })
        .collect();
    Ok(Metrics {
        cmc,
        map: ap_sum / nq,
        mode,
    })
}

/// Embeds the test split and evaluates one search direction.
pub fn evaluate_split(params: &Params, cfg: &TrainConfig, ds: &SynthDataset, mode: SearchMode) -> Result<Metrics> {
    let qm = mode.query_modality();
    let (qx, ql) = ds.stacked(Split::Test, qm);
    let (gx, gl) = ds.stacked(Split::Test, qm.other());
    let threads = threads_from_env();
    let query = EmbeddingSet::new(embed_with(params, cfg, &qx, qm, threads), ql.clone(), vec![qm; ql.len()])?;
    let gallery = EmbeddingSet::new(
        embed_with(params, cfg, &gx, qm.other(), threads),
        gl.clone(),
        vec![qm.other(); gl.len()],
    )?;
    cmc_map(&query, &gallery)
}

pub fn evaluate(ck: &Checkpoint, ds: &SynthDataset, mode: SearchMode) -> Result<Metrics> {
    evaluate_split(&ck.params, &ck.train_config()?, ds, mode)
}

/// `mode,rank1,rank10,rank20,map` rows.
pub fn metrics_csv(rows: &[Metrics]) -> String {
    let mut s = String::from("mode,rank1,rank10,rank20,map\n");
    for m in rows {
        writeln!(s, "{},{},{},{},{}", m.mode.as_str(), m.rank(1), m.rank(10), m.rank(20), m.map)
            .expect("string write");
    }
    s
}

/// Human-readable table in percent.
pub fn metrics_table(rows: &[Metrics]) -> String {
    let mut s = format!("{:<6} {:>7} {:>7} {:>7} {:>7}\n", "mode", "Rank-1", "Rank-10", "Rank-20", "mAP");
    for m in rows {
        writeln!(
            s,
            "{:<6} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            m.mode.as_str(),
            100.0 * m.rank(1),
            100.0 * m.rank(10),
            100.0 * m.rank(20),
            100.0 * m.map
        )
        .expect("string write");
    }
    s
}
