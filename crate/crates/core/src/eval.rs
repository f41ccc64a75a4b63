//! Segmentation metrics: per-class IoU from an aggregate confusion matrix,
//! mean IoU over the classes present in ground truth or prediction, and the
//! teacher-student performance gap.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::nets::Network;
use crate::parallel::par_map;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// IoU per class; `None` marks classes absent from both prediction and
    /// ground truth, which are excluded from the mean.
    pub per_class: Vec<Option<f64>>,
    pub mean_iou: f64,
    /// Rows are ground-truth classes, columns predicted classes.
    pub confusion: Vec<Vec<u64>>,
    pub pixel_count: u64,
}

/// Confusion matrix of one prediction/ground-truth pair (or accumulated over
/// many: call repeatedly with the same matrix).
pub fn accumulate_confusion(
    pred: &[u8],
    gt: &[u8],
    class_count: usize,
    confusion: &mut [Vec<u64>],
) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    for (&p, &g) in pred.iter().zip(gt) {
        if p as usize >= class_count || g as usize >= class_count {
            return Err(Error::invalid(format!(
                "class index out of range: pred {p}, gt {g}, K={class_count}"
            )));
        }
        confusion[g as usize][p as usize] += 1;
    }
    Ok(())
}

/// Metrics from an accumulated confusion matrix.
pub fn report_from_confusion(confusion: Vec<Vec<u64>>) -> Result<MiouReport> {
    let k = confusion.len();
    let mut per_class = Vec::with_capacity(k);
    let mut pixel_count = 0u64;
    for row in &confusion {
        if row.len() != k {
            return Err(Error::shape("confusion matrix is not square".to_string()));
        }
        pixel_count += row.iter().sum::<u64>();
    }
    let mut sum = 0.0f64;
    let mut present = 0usize;
    for c in 0..k {
        let tp = confusion[c][c];
        let fn_: u64 = confusion[c].iter().sum::<u64>() - tp;
        let fp: u64 = (0..k).map(|g| confusion[g][c]).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        if denom == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / denom as f64;
            per_class.push(Some(iou));
            sum += iou;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::invalid("empty confusion matrix"));
    }
    Ok(MiouReport { per_class, mean_iou: sum / present as f64, confusion, pixel_count })
}

/// Per-class IoU and mean IoU of one prediction against ground truth.
pub fn miou(pred: &[u8], gt: &[u8], class_count: usize) -> Result<MiouReport> {
    if class_count == 0 {
        return Err(Error::invalid("miou needs at least one class"));
    }
    let mut confusion = vec![vec![0u64; class_count]; class_count];
    accumulate_confusion(pred, gt, class_count, &mut confusion)?;
    report_from_confusion(confusion)
}

/// Argmax over the channel axis of 1×K×H×W logits.
pub fn argmax_classes(logits: &Tensor<f32>) -> Result<Vec<u8>> {
    let (n, k, h, w) = logits.dims4()?;
    if n != 1 {
        return Err(Error::shape("argmax_classes expects a single-sample batch".to_string()));
    }
    let plane = h * w;
    let data = logits.data();
    let mut out = vec![0u8; plane];
    for px in 0..plane {
        let mut best = data[px];
        let mut cls = 0u8;
        for c in 1..k {
            let v = data[c * plane + px];
            if v > best {
                best = v;
                cls = c as u8;
            }
        }
        out[px] = cls;
    }
    Ok(out)
}

/// A metric report tied to the evaluation split it was computed on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split_hash: String,
    pub miou: MiouReport,
}

/// Identity of an evaluation split: config hash, seed, name and ids.
pub fn split_hash(corpus: &Corpus) -> String {
    let mut hasher = Sha256::new();
    hasher.update(corpus.manifest.config_hash.as_bytes());
    hasher.update(corpus.manifest.seed.to_le_bytes());
    hasher.update(corpus.manifest.name.as_bytes());
    for e in &corpus.manifest.entries {
        hasher.update(e.id.to_le_bytes());
    }
    crate::corpus::hex(&hasher.finalize())
}

/// Evaluate a network on a labeled corpus: one aggregate confusion matrix
/// over every image, parallel per image.
pub fn evaluate_network(net: &Network, corpus: &Corpus) -> Result<EvalReport> {
    if !corpus.manifest.labeled {
        return Err(Error::invalid(format!(
            "corpus {} is unlabeled; cannot score predictions",
            corpus.manifest.name
        )));
    }
    let k = corpus.manifest.class_count;
    let per_image = par_map(&corpus.records, |_, record| -> Result<Vec<Vec<u64>>> {
        let logits = net.forward_eval(&record.pixels)?;
        let pred = argmax_classes(&logits)?;
        let gt = record
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("record {} has no labels", record.id)))?;
        let mut confusion = vec![vec![0u64; k]; k];
        accumulate_confusion(&pred, gt, k, &mut confusion)?;
        Ok(confusion)
    });
    let mut total = vec![vec![0u64; k]; k];
    for c in per_image {
        let c = c?;
        for (dst, src) in total.iter_mut().zip(&c) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Ok(EvalReport { split_hash: split_hash(corpus), miou: report_from_confusion(total)? })
}

/// Signed teacher-minus-student gap on the same split; smaller is better
/// for the student. Refuses reports from different splits.
pub fn performance_gap(teacher: &EvalReport, student: &EvalReport) -> Result<f64> {
    if teacher.split_hash != student.split_hash {
        return Err(Error::mismatch(format!(
            "performance gap across different evaluation splits ({} vs {})",
            teacher.split_hash, student.split_hash
        )));
    }
    Ok(teacher.miou.mean_iou - student.miou.mean_iou)
}
