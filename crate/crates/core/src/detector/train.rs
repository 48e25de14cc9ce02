use std::fmt::Write as _;

use rand::seq::SliceRandom;

use super::loss::{loss_nodes, LossBreakdown, LossWeighting};
use super::target::assign_weighted;
use super::{forward, heads_output, Detector, DetectorError};
use crate::numerics::{NodeId, Sgd, Tape, Tensor};
use crate::seed::rng_for;
use crate::synthdata::{Annotation, Dataset, Role};

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorTrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weighting: LossWeighting,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            momentum: 0.9,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            weighting: LossWeighting::Off,
        }
    }
}

/// One image's loss and parameter gradients at the current weights.
pub(crate) fn image_gradients(
    det: &Detector,
    input: &Tensor<f32>,
    boxes: &[(Annotation, f64)],
    weighting: LossWeighting,
) -> Result<(LossBreakdown, Vec<Tensor<f32>>), DetectorError> {
    let mut tape = Tape::<f32>::new();
    let ids: Vec<NodeId> = det.params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let x = tape.constant(input.clone());
    let heads = forward(&mut tape, &ids, x)?;
    let out = heads_output(&tape, heads, &det.config);
    let targets = assign_weighted(boxes, &det.config, Some(&out))?;
    let loss = loss_nodes(&mut tape, heads, &targets, &det.config, weighting)?;
    tape.backward(loss.total)?;
    let grads = ids.iter().map(|&id| tape.grad_tensor(id)).collect();
    Ok((loss.read(&tape), grads))
}

/// Mini-batch SGD with momentum over the grid loss. Batches are drawn from a
/// per-epoch shuffle seeded from `cfg.seed`; batch gradients are the mean of
/// per-image gradients, summed in batch order. Returns the mean per-image
/// loss of every epoch.
pub fn train_detector(
    mut det: Detector,
    data: &Dataset,
    cfg: &DetectorTrainConfig,
) -> Result<(Detector, Vec<LossBreakdown>), DetectorError> {
    if !matches!(data.role, Role::Gold | Role::Silver) {
        return Err(DetectorError::WrongRole(data.role));
    }
    if data.is_empty() {
        return Err(DetectorError::EmptyDataset);
    }
    let n = det.config.input_size;
    let mut inputs = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    for item in &data.items {
        det.check_image(&item.image)?;
        inputs.push(Tensor::new(&[3, n, n], item.image.to_unit())?);
        labels.push(item.labels.weighted());
    }

    let mut sgd = Sgd::new(cfg.lr as f32, cfg.momentum as f32);
    let batch = cfg.batch_size.max(1);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(cfg.seed, &format!("detector-epoch/{epoch}"));
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        for chunk in order.chunks(batch) {
            let mut sum: Option<Vec<Tensor<f32>>> = None;
            for &i in chunk {
                let (loss, grads) =
                    image_gradients(&det, &inputs[i], &labels[i], cfg.weighting)?;
                epoch_loss.accumulate(&loss);
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.data_mut()
                                .iter_mut()
                                .zip(g.data())
                                .for_each(|(p, q)| *p += q);
                        }
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f32;
            let grads: Vec<Tensor<f32>> = sum
                .expect("chunks are non-empty")
                .into_iter()
                .map(|g| g.map(|v| v * scale))
                .collect();
            sgd.step(&mut det.params, &grads);
        }
        let mean = epoch_loss.scaled(1.0 / data.len() as f64);
        log::debug!("epoch={epoch} loss={:.6}", mean.total);
        history.push(mean);
    }
    Ok((det, history))
}

/// `epoch,centre,box,object,noobj,score,total`, one row per epoch.
pub fn loss_history_csv(history: &[LossBreakdown]) -> String {
    let mut out = String::from("epoch,centre,box,object,noobj,score,total\n");
    for (e, l) in history.iter().enumerate() {
        write!(out, "{e}").unwrap();
        for v in l.terms() {
            write!(out, ",{v:.6}").unwrap();
        }
        out.push('\n');
    }
    out
}
