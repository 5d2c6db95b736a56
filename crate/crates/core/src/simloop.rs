//! Weak-supervision loop driven by the noisy oracle: pretraining on fully
//! annotated synthetic pages, initialization of pseudo-labels, and training
//! passes whose oracle noise shrinks as a trained model would improve.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::geometry::GridCoord;
use crate::losses::{loss_total, LossReport, Term};
use crate::matching::{semantic_match, spatial_filter, CharPair};
use crate::metrics::{label_quality, LabelQuality};
use crate::predictions::{oracle_predict, staircase, OracleNoise, PredictionMaps};
use crate::pseudolabels::{
    build_targets, update, LabelRecord, LossTargets, PseudoLabel, PseudoLabelStore, DEFAULT_EPSILON,
};
use crate::synth::{page_seed, SyntheticPage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Fully supervised synthetic pages only.
    Pretrain,
    /// Matching and updating without loss computation.
    Initialize,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub stage: Stage,
    pub n_passes: usize,
    /// Oracle noise of the first pass.
    pub noise: OracleNoise,
    /// Noise is halved after every this many passes; 0 keeps it constant.
    pub halve_every: usize,
    /// Probability that the next visit is a transcript-only page rather than
    /// a synthetic one.
    pub real_prob: f64,
    pub th_ar: f64,
    pub th_iou: f64,
    pub epsilon: f64,
    pub decode: DecodeConfig,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Train,
            n_passes: 1,
            noise: OracleNoise::default(),
            halve_every: 0,
            real_prob: 0.7,
            th_ar: 0.3,
            th_iou: 0.5,
            epsilon: DEFAULT_EPSILON,
            decode: DecodeConfig::default(),
            seed: 0,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_passes == 0 {
            return Err(Error::Config("n_passes must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.real_prob) {
            return Err(Error::Config(format!("real_prob {} outside [0, 1]", self.real_prob)));
        }
        self.noise.validate()
    }

    /// Noise used on pass `pass` (0-based).
    pub fn noise_at(&self, pass: usize) -> OracleNoise {
        match pass.checked_div(self.halve_every) {
            None => self.noise,
            Some(halvings) => self.noise.scaled(0.5f64.powi(halvings as i32)),
        }
    }
}

/// Pages used by the loop: `real` pages are supervised by transcripts only,
/// `synthetic` pages by their full ground truth.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub real: Vec<SyntheticPage>,
    pub synthetic: Vec<SyntheticPage>,
}

/// Mean of each loss term over pages; sample counts are summed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossAggregate {
    pub pages: usize,
    pub mean: LossReport,
}

impl LossAggregate {
    fn from_reports(reports: &[LossReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&LossReport) -> &Term| -> Term {
            Term {
                value: reports.iter().map(|r| f(r).value).sum::<f64>() / n,
                samples: reports.iter().map(|r| f(r).samples).sum(),
                empty: reports.iter().all(|r| f(r).empty),
                clamped: reports.iter().map(|r| f(r).clamped).sum(),
            }
        };
        let mut mean = LossReport {
            l_dis: avg(|r| &r.l_dis),
            l_box: avg(|r| &r.l_box),
            l_cls: avg(|r| &r.l_cls),
            l_sol: avg(|r| &r.l_sol),
            l_eol: avg(|r| &r.l_eol),
            l_rd: avg(|r| &r.l_rd),
            l_total: 0.0,
        };
        mean.l_total = mean.sum();
        Some(Self {
            pages: reports.len(),
            mean,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassReport {
    pub stage: Stage,
    pub pass: usize,
    /// Absent in the initialization stage.
    pub loss: Option<LossAggregate>,
    /// Annotated characters of the real pages that have a pseudo-label.
    pub coverage: f64,
    /// Mean IoU of existing pseudo-labels against ground truth.
    pub mean_iou: f64,
    pub matched_lines: usize,
    pub matched_chars: usize,
    /// Character matches removed by the IoU veto.
    pub filtered_chars: usize,
    pub real_visits: usize,
    pub synthetic_visits: usize,
}

/// Targets and store describing a fully annotated page.
pub fn full_targets(page: &SyntheticPage) -> (LossTargets, PseudoLabelStore<f64>) {
    let mut store = PseudoLabelStore::new();
    let mut t = LossTargets::default();
    let reading = page.reading_direction();
    let n_lines = page.n_lines();
    let mut grids_by_line: Vec<Vec<GridCoord>> = vec![Vec::new(); n_lines];
    for c in &page.chars {
        let g = page.grid(c);
        grids_by_line[c.line].push(g);
        store.insert(
            &page.page_id,
            c.line,
            c.pos,
            PseudoLabel {
                bbox: c.bbox,
                gamma: 1.0,
                count: 1,
            },
        );
        t.s_c.insert(g, (c.line, c.pos));
    }
    for line in &grids_by_line {
        for (k, &g) in line.iter().enumerate() {
            if k == 0 {
                t.s_s_pos.insert(g);
            } else {
                t.s_s_neg.insert(g);
            }
            if k + 1 == line.len() {
                t.s_e_pos.insert(g);
            } else {
                t.s_e_neg.insert(g);
            }
        }
        for pair in line.windows(2) {
            let mut cur = pair[0];
            for d in staircase(pair[0], pair[1], reading) {
                t.s_rd.insert((cur, d));
                cur = page.shape.step(cur, d).expect("path stays on the page");
            }
        }
    }
    t.s_d_neg = page.shape.grids().filter(|g| !t.s_c.contains_key(g)).collect();
    (t, store)
}

struct PageOutcome {
    loss: Option<LossReport>,
    matched_lines: usize,
    matched_chars: usize,
    filtered: usize,
}

fn weak_page(
    page: &SyntheticPage,
    store: &mut PseudoLabelStore<f64>,
    maps: &PredictionMaps<f64>,
    config: &StageConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PageOutcome> {
    let annot = page.transcripts();
    let result = decode(maps, &config.decode)?;
    let matches = semantic_match(&result.transcripts(), &annot.lines, config.th_ar);
    let kept = spatial_filter(&matches.m_c, &result, store, &page.page_id, config.th_iou);
    let kept_chars: BTreeSet<(usize, usize)> = kept.iter().map(|c: &CharPair| (c.p, c.m)).collect();
    let m_ce: BTreeSet<(usize, usize)> = matches.m_ce.intersection(&kept_chars).copied().collect();
    update(store, &page.page_id, &kept, &result, config.epsilon);
    let targets = build_targets(store, &annot, &result, &m_ce, &page.shape, rng);
    let loss = (config.stage == Stage::Train).then(|| loss_total(maps, &targets, store, &annot));
    Ok(PageOutcome {
        loss,
        matched_lines: matches.m_l.len(),
        matched_chars: kept.len(),
        filtered: matches.m_c.len() - kept.len(),
    })
}

fn full_page_loss(page: &SyntheticPage, maps: &PredictionMaps<f64>) -> LossReport {
    let (targets, store) = full_targets(page);
    loss_total(maps, &targets, &store, &page.transcripts())
}

/// Runs `config.n_passes` passes of one stage and reports after each.
///
/// Real pages are visited in dataset order. In the training stage every visit
/// is first drawn to be real (probability `real_prob`) or synthetic; synthetic
/// visits cycle through the synthetic pages. The result depends only on the
/// dataset, the initial store, and the configuration.
pub fn run_stage(
    dataset: &Dataset,
    store: &mut PseudoLabelStore<f64>,
    config: &StageConfig,
) -> Result<Vec<PassReport>> {
    config.validate()?;
    let real_ids: BTreeSet<&str> = dataset.real.iter().map(|p| p.page_id.as_str()).collect();
    if real_ids.len() != dataset.real.len() {
        return Err(Error::Config("duplicate page ids in dataset".into()));
    }
    if let Some(stray) = store.page_ids().into_iter().find(|id| !real_ids.contains(id)) {
        return Err(Error::Config(format!(
            "pseudo-label store has page `{stray}` not in the dataset"
        )));
    }
    if config.stage == Stage::Pretrain && dataset.synthetic.is_empty() {
        return Err(Error::Config("pretraining needs synthetic pages".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let page_index: BTreeMap<&str, usize> = dataset
        .real
        .iter()
        .chain(&dataset.synthetic)
        .enumerate()
        .map(|(k, p)| (p.page_id.as_str(), k))
        .collect();
    let n_all = page_index.len().max(1);
    let mut synth_cursor = 0usize;
    let mut reports = Vec::with_capacity(config.n_passes);

    for pass in 0..config.n_passes {
        let noise = config.noise_at(pass);
        let noise_for = |page: &SyntheticPage| {
            let k = page_index[page.page_id.as_str()];
            noise.with_seed(page_seed(noise.seed, pass * n_all + k))
        };
        let mut losses = Vec::new();
        let mut report = PassReport {
            stage: config.stage,
            pass,
            loss: None,
            coverage: 0.0,
            mean_iou: 0.0,
            matched_lines: 0,
            matched_chars: 0,
            filtered_chars: 0,
            real_visits: 0,
            synthetic_visits: 0,
        };

        let mut visit_synthetic = |losses: &mut Vec<LossReport>, report: &mut PassReport| -> Result<()> {
            let page = &dataset.synthetic[synth_cursor % dataset.synthetic.len()];
            synth_cursor += 1;
            let maps = oracle_predict::<f64>(page, &noise_for(page))?;
            losses.push(full_page_loss(page, &maps));
            report.synthetic_visits += 1;
            Ok(())
        };

        match config.stage {
            Stage::Pretrain => {
                for _ in 0..dataset.synthetic.len() {
                    visit_synthetic(&mut losses, &mut report)?;
                }
            }
            Stage::Initialize | Stage::Train => {
                let mut next_real = 0;
                while next_real < dataset.real.len() {
                    let take_real = rng.gen::<f64>() < config.real_prob;
                    if config.stage == Stage::Train && !take_real && !dataset.synthetic.is_empty() {
                        visit_synthetic(&mut losses, &mut report)?;
                        continue;
                    }
                    let page = &dataset.real[next_real];
                    next_real += 1;
                    let maps = oracle_predict::<f64>(page, &noise_for(page))?;
                    let out = weak_page(page, store, &maps, config, &mut rng)?;
                    report.matched_lines += out.matched_lines;
                    report.matched_chars += out.matched_chars;
                    report.filtered_chars += out.filtered;
                    report.real_visits += 1;
                    losses.extend(out.loss);
                }
            }
        }

        report.loss = LossAggregate::from_reports(&losses);
        let quality = real_quality(store, dataset);
        report.coverage = quality.coverage;
        report.mean_iou = quality.mean_iou;
        log::info!(
            "{:?} pass {pass}: coverage {:.4}, mean IoU {:.4}",
            config.stage,
            report.coverage,
            report.mean_iou
        );
        reports.push(report);
    }
    Ok(reports)
}

fn real_quality(store: &PseudoLabelStore<f64>, dataset: &Dataset) -> LabelQuality {
    let annots: Vec<_> = dataset.real.iter().map(|p| (p.annotation(), p.shape)).collect();
    let refs: Vec<_> = annots.iter().map(|(a, s)| (a, *s)).collect();
    label_quality(store, &refs)
}

/// Pseudo-labels of the dataset's real pages in export form, plus their
/// quality against the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelExport {
    pub records: Vec<LabelRecord>,
    pub quality: LabelQuality,
}

pub fn export_labels(store: &PseudoLabelStore<f64>, dataset: &Dataset) -> LabelExport {
    let ids: BTreeSet<&str> = dataset.real.iter().map(|p| p.page_id.as_str()).collect();
    let records = store
        .iter()
        .filter(|((page_id, _, _), _)| ids.contains(page_id.as_str()))
        .map(|((page_id, q, n), l)| LabelRecord {
            page_id: page_id.clone(),
            q: *q,
            n: *n,
            x: l.bbox.x,
            y: l.bbox.y,
            w: l.bbox.w,
            h: l.bbox.h,
            gamma: l.gamma,
            count: l.count,
        })
        .collect();
    LabelExport {
        records,
        quality: real_quality(store, dataset),
    }
}
