//! Bit accuracy, fidelity measures and the robustness and capacity harnesses.

use std::fmt::Write as _;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autodiff::Rng;
use crate::codec::{logits_to_bits, WatermarkBits};
use crate::dsp::{inference_attacks, mel_spectrogram, stft_magnitude, AttackSpec, AudioClip, DitherPdf};
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::model::Model;
use crate::sdft::LOG_FLOOR;

/// Clips synthesized per forward chain during evaluation.
pub const EVAL_BATCH: usize = 4;

/// Percentage of positions where `decoded` matches `truth`.
pub fn bit_accuracy(decoded: &WatermarkBits, truth: &WatermarkBits) -> Result<f64> {
    if decoded.len() != truth.len() {
        return Err(Error::shape("bit_accuracy", format!("{} vs {} bits", decoded.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::invalid("bit_accuracy of an empty payload"));
    }
    Ok(100.0 * matches(decoded, truth) as f64 / truth.len() as f64)
}

fn matches(a: &WatermarkBits, b: &WatermarkBits) -> usize {
    a.bits().iter().zip(b.bits()).filter(|(x, y)| x == y).count()
}

/// `10 log10(sum ref^2 / sum (ref - test)^2)`; `+inf` when the two agree.
pub fn snr_db(reference: &[f64], test: &[f64]) -> Result<f64> {
    let (sig, noise) = snr_terms(reference, test)?;
    if sig == 0.0 {
        return Err(Error::invalid("snr_db: reference is all zeros"));
    }
    Ok(10.0 * (sig / noise).log10())
}

fn snr_terms(reference: &[f64], test: &[f64]) -> Result<(f64, f64)> {
    if reference.len() != test.len() {
        return Err(Error::shape("snr_db", format!("{} vs {} samples", reference.len(), test.len())));
    }
    let sig = reference.iter().map(|r| r * r).sum();
    let noise = reference.iter().zip(test).map(|(r, t)| (r - t).powi(2)).sum();
    Ok((sig, noise))
}

/// Decibel value for reports: `inf` instead of Rust's `inf` spelling variants.
pub fn format_db(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:.2}")
    }
}

/// A row of the robustness table: one attack or an ordered pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum EvalAttack {
    Single(AttackSpec),
    /// Applied first to last.
    Pair(AttackSpec, AttackSpec),
}

impl EvalAttack {
    pub fn label(&self) -> String {
        match self {
            EvalAttack::Single(a) => a.label(),
            EvalAttack::Pair(a, b) => format!("{}+{}", a.label(), b.label()),
        }
    }

    pub fn apply(&self, clip: &AudioClip, rng: &mut Rng) -> Result<AudioClip> {
        match self {
            EvalAttack::Single(a) => a.apply(clip, rng),
            EvalAttack::Pair(a, b) => b.apply(&a.apply(clip, rng)?, rng),
        }
    }
}

/// The seven compound attacks, built from the inference-time settings with
/// GN at 20 dB and PN at level 0.5.
pub fn compound_attacks() -> Vec<EvalAttack> {
    let gn = AttackSpec::GaussianNoise { snr_db: 20.0 };
    let pn = AttackSpec::PinkNoise { level: 0.5 };
    let bpf = AttackSpec::Bandpass {
        low_hz: 300.0,
        high_hz: 8000.0,
    };
    let echo = AttackSpec::DEFAULT_ECHO;
    let dither = AttackSpec::Dither { pdf: DitherPdf::Tpdf };
    [(gn, bpf), (gn, echo), (gn, dither), (gn, pn), (pn, bpf), (pn, echo), (pn, dither)]
        .into_iter()
        .map(|(a, b)| EvalAttack::Pair(a, b))
        .collect()
}

/// Every individual inference-time attack followed by the compound pairs.
pub fn robustness_attacks() -> Vec<EvalAttack> {
    let mut v: Vec<EvalAttack> = inference_attacks().into_iter().map(EvalAttack::Single).collect();
    v.extend(compound_attacks());
    v
}

/// The attacked branches of the training simulator at their harshest
/// setting (GN at 15 dB).
pub fn training_intensity_attacks() -> Vec<EvalAttack> {
    [
        AttackSpec::GaussianNoise { snr_db: 15.0 },
        AttackSpec::DEFAULT_ECHO,
        AttackSpec::RearCrop { rate: 0.25 },
        AttackSpec::Dither { pdf: DitherPdf::Rpdf },
    ]
    .into_iter()
    .map(EvalAttack::Single)
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessRow {
    pub attack: String,
    /// Bit accuracy in percent.
    pub acc: f64,
    /// Watermarked vs. unwatermarked output, both under the same attack and
    /// noise draws, pooled over clips.
    pub snr_db: f64,
    /// Mean absolute log-mel difference per cell.
    pub mel_l1: f64,
    /// Mean absolute log-STFT-magnitude difference per cell.
    pub stft_l1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessReport {
    pub seed: u64,
    /// SHA-256 of the run config JSON.
    pub config_hash: String,
    pub clip_count: usize,
    pub payload_bits: usize,
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    pub fn row(&self, label: &str) -> Option<&RobustnessRow> {
        self.rows.iter().find(|r| r.attack == label)
    }

    /// Mean accuracy over every row except `Non`.
    pub fn attacked_acc(&self) -> f64 {
        let rows: Vec<_> = self.rows.iter().filter(|r| r.attack != "Non").collect();
        rows.iter().map(|r| r.acc).sum::<f64>() / rows.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# seed={} config_hash={} clips={} payload_bits={}\nattack,acc_pct,snr_db,mel_l1,stft_l1\n",
            self.seed, self.config_hash, self.clip_count, self.payload_bits
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.4},{},{:.6},{:.6}",
                r.attack,
                r.acc,
                format_db(r.snr_db),
                r.mel_l1,
                r.stft_l1
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.attack.len()).max().unwrap_or(0).max(6);
        let mut s = format!(
            "seed {}  config {}  clips {}  payload {} bits\n{:<w$}  {:>7}  {:>8}  {:>8}  {:>8}\n",
            self.seed,
            &self.config_hash[..12.min(self.config_hash.len())],
            self.clip_count,
            self.payload_bits,
            "attack",
            "ACC%",
            "SNR dB",
            "mel-L1",
            "STFT-L1"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<w$}  {:>7.2}  {:>8}  {:>8.4}  {:>8.4}",
                r.attack,
                r.acc,
                format_db(r.snr_db),
                r.mel_l1,
                r.stft_l1
            );
        }
        s
    }
}

pub fn config_hash(model: &Model) -> String {
    Sha256::digest(model.config.to_json().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Default)]
struct Accumulator {
    hits: usize,
    bits: usize,
    sig: f64,
    noise: f64,
    mel: f64,
    mel_cells: usize,
    stft: f64,
    stft_cells: usize,
}

impl Accumulator {
    fn finish(&self, attack: String) -> RobustnessRow {
        let snr = if self.noise == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (self.sig / self.noise).log10()
        };
        RobustnessRow {
            attack,
            acc: 100.0 * self.hits as f64 / self.bits as f64,
            snr_db: snr,
            mel_l1: self.mel / self.mel_cells.max(1) as f64,
            stft_l1: self.stft / self.stft_cells.max(1) as f64,
        }
    }
}

fn l1_cells(a: &[f64], b: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (f(*x) - f(*y)).abs()).sum()
}

/// Watermarked clips, their matched unwatermarked references and payloads.
pub struct Generated {
    pub marked: Vec<AudioClip>,
    pub reference: Vec<AudioClip>,
    pub payloads: Vec<WatermarkBits>,
}

/// Synthesizes `count` random payloads over the dataset clips in turn. Each
/// reference replays the watermarked chain's noise with a zero latent.
pub fn generate_eval_set(model: &Model, data: &Dataset, count: usize, rng: &mut Rng) -> Result<Generated> {
    if data.is_empty() || count == 0 {
        return Err(Error::invalid("evaluation needs at least one clip and one payload"));
    }
    let mut out = Generated {
        marked: Vec::with_capacity(count),
        reference: Vec::with_capacity(count),
        payloads: Vec::with_capacity(count),
    };
    let mut start = 0;
    while start < count {
        let n = EVAL_BATCH.min(count - start);
        let clips: Vec<&AudioClip> = (start..start + n).map(|i| &data.clips[i % data.len()]).collect();
        let cond = model.conditioning(&clips)?;
        let payloads = (0..n)
            .map(|_| WatermarkBits::random(model.payload_bits(), rng))
            .collect::<Result<Vec<_>>>()?;
        let chain = rng.fork();
        out.marked.extend(model.synthesize(Some(&payloads), &cond, &mut chain.clone())?);
        out.reference.extend(model.synthesize(None, &cond, &mut chain.clone())?);
        out.payloads.extend(payloads);
        start += n;
    }
    Ok(out)
}

/// Runs every attack over a generated set. Each (attack, clip) pair gets its
/// own noise stream, shared by the watermarked clip and its reference.
pub fn evaluate_generated(
    model: &Model,
    set: &Generated,
    attacks: &[EvalAttack],
    rng: &mut Rng,
) -> Result<Vec<RobustnessRow>> {
    let audio = &model.config.audio;
    let mut rows = Vec::with_capacity(attacks.len());
    for attack in attacks {
        let mut acc = Accumulator::default();
        for ((marked, reference), payload) in set.marked.iter().zip(&set.reference).zip(&set.payloads) {
            let stream = rng.fork();
            let y = attack.apply(marked, &mut stream.clone())?;
            let r = attack.apply(reference, &mut stream.clone())?;
            let decoded = logits_to_bits(&model.extract_logits(&y)?)?;
            acc.hits += matches(&decoded, payload);
            acc.bits += payload.len();
            let (s, n) = snr_terms(&r.samples, &y.samples)?;
            acc.sig += s;
            acc.noise += n;
            if y.len() >= audio.window_len {
                let (my, mr) = (
                    mel_spectrogram(&y, &model.filterbank, audio.window_len, audio.hop)?,
                    mel_spectrogram(&r, &model.filterbank, audio.window_len, audio.hop)?,
                );
                acc.mel += l1_cells(my.magnitudes.data(), mr.magnitudes.data(), |v| v);
                acc.mel_cells += my.magnitudes.numel();
                let (sy, sr) = (
                    stft_magnitude(&y, audio.window_len, audio.hop)?,
                    stft_magnitude(&r, audio.window_len, audio.hop)?,
                );
                acc.stft += l1_cells(sy.magnitudes.data(), sr.magnitudes.data(), |v| (v + LOG_FLOOR).ln());
                acc.stft_cells += sy.magnitudes.numel();
            }
        }
        rows.push(acc.finish(attack.label()));
    }
    Ok(rows)
}

/// The robustness table: a pure function of model, dataset, attack list,
/// payload count and seed.
pub fn evaluate_robustness(
    model: &Model,
    data: &Dataset,
    attacks: &[EvalAttack],
    payloads: usize,
    seed: u64,
) -> Result<RobustnessReport> {
    let mut rng = Rng::new(seed);
    let set = generate_eval_set(model, data, payloads, &mut rng)?;
    let rows = evaluate_generated(model, &set, attacks, &mut rng)?;
    let labels: std::collections::HashSet<_> = rows.iter().map(|r| &r.attack).collect();
    if labels.len() != rows.len() {
        return Err(Error::invalid("attack list has duplicate rows"));
    }
    let report = RobustnessReport {
        seed,
        config_hash: config_hash(model),
        clip_count: payloads,
        payload_bits: model.payload_bits(),
        rows,
    };
    if let Some(clean) = report.row("Non") {
        for r in &report.rows {
            if r.acc > clean.acc + 5.0 {
                log::warn!("`{}` scores {:.2}% above the clean row's {:.2}%", r.attack, r.acc, clean.acc);
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CapacityRow {
    pub payload_bits: usize,
    pub clean_acc: f64,
    /// Mean over the training-intensity attacks.
    pub attacked_acc: f64,
    pub sdft_steps: usize,
}

pub fn capacity_table(rows: &[CapacityRow]) -> String {
    let mut s = format!("{:>6}  {:>9}  {:>12}  {:>6}\n", "bits", "clean ACC", "attacked ACC", "steps");
    for r in rows {
        let _ = writeln!(
            s,
            "{:>6}  {:>9.2}  {:>12.2}  {:>6}",
            r.payload_bits, r.clean_acc, r.attacked_acc, r.sdft_steps
        );
    }
    s
}

pub fn capacity_csv(rows: &[CapacityRow]) -> String {
    let mut s = String::from("payload_bits,clean_acc_pct,attacked_acc_pct,sdft_steps\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.4},{:.4},{}", r.payload_bits, r.clean_acc, r.attacked_acc, r.sdft_steps);
    }
    s
}

/// Clean and training-intensity accuracy of a fine-tuned model.
pub fn capacity_row(model: &Model, data: &Dataset, payloads: usize, seed: u64) -> Result<CapacityRow> {
    let mut attacks = vec![EvalAttack::Single(AttackSpec::None)];
    attacks.extend(training_intensity_attacks());
    let report = evaluate_robustness(model, data, &attacks, payloads, seed)?;
    Ok(CapacityRow {
        payload_bits: model.payload_bits(),
        clean_acc: report.rows[0].acc,
        attacked_acc: report.attacked_acc(),
        sdft_steps: model.config.sdft.steps,
    })
}
