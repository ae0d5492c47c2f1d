//! Encoder–classifier composition: per-client model assembly, parameter
//! partitioning into encoder/classifier/pretext blocks, latent extraction,
//! and the seeded per-client encoder-architecture search.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{
    apply_layer_grads, backward, forward, loss_and_dlogits, params_of_layers, seeded_rng, set_layer_params, softmax,
    Activation, DenseLayer, LayerGrad, LossSpec, ParamSet, Targets, Tensor2,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Classification { classes: usize },
    Regression { loss: LossSpec },
}

impl Task {
    pub fn loss_spec(&self) -> LossSpec {
        match self {
            Task::Classification { .. } => LossSpec::CrossEntropy,
            Task::Regression { loss } => *loss,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Task::Classification { classes } => *classes,
            Task::Regression { .. } => 1,
        }
    }

    /// Whether metric `a` beats metric `b` (accuracy: higher, MAE: lower).
    pub fn better(&self, a: f64, b: f64) -> bool {
        match self {
            Task::Classification { .. } => a > b,
            Task::Regression { .. } => a < b,
        }
    }
}

/// Architecture description shared between config files and model assembly.
///
/// `encoder_widths` lists the encoder layer widths in order; the last entry
/// is the latent dimension. The classifier head has a fixed architecture
/// across all clients in a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub task: Task,
}

impl ModelSpec {
    /// Default head: one hidden layer of width 2ℓ, then the output layer.
    pub fn with_default_head(input_dim: usize, encoder_widths: Vec<usize>, task: Task) -> Result<Self> {
        let latent = *encoder_widths
            .last()
            .ok_or_else(|| Error::Config("encoder_widths must be nonempty".into()))?;
        Ok(ModelSpec {
            input_dim,
            encoder_widths,
            classifier_hidden: vec![2 * latent],
            task,
        })
    }

    pub fn latent_dim(&self) -> usize {
        *self.encoder_widths.last().expect("encoder_widths nonempty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("encoder_widths must be nonempty positive".into()));
        }
        if self.classifier_hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("classifier_hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Number of trainable parameters of the encoder block.
    pub fn encoder_param_count(&self) -> usize {
        let mut n = 0;
        let mut prev = self.input_dim;
        for &w in &self.encoder_widths {
            n += prev * w + w;
            prev = w;
        }
        n
    }
}

/// A client's model: personalised encoder plus shared-architecture heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientModel {
    pub spec: ModelSpec,
    pub encoder: Vec<DenseLayer>,
    pub classifier: Vec<DenseLayer>,
    /// v-way head used only in the pretext phase.
    pub pretext: Option<Vec<DenseLayer>>,
}

/// Build a layer chain: hidden layers relu, final layer identity (softmax is
/// fused into the loss).
fn build_chain(input: usize, widths: &[usize], rng: &mut ChaCha8Rng) -> Vec<DenseLayer> {
    let mut layers = Vec::with_capacity(widths.len());
    let mut prev = input;
    for (i, &w) in widths.iter().enumerate() {
        let act = if i + 1 == widths.len() { Activation::Identity } else { Activation::Relu };
        layers.push(DenseLayer::init_seeded(prev, w, act, rng));
        prev = w;
    }
    layers
}

impl ClientModel {
    /// Seeded initialisation; the seed is conventionally derived from the
    /// client id so every client gets an independent stream.
    pub fn init(spec: ModelSpec, seed: &[u64]) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded_rng(seed);
        // hidden encoder layers relu, latent layer identity
        let encoder = build_chain(spec.input_dim, &spec.encoder_widths, &mut rng);
        let mut clf_widths = spec.classifier_hidden.clone();
        clf_widths.push(spec.task.output_dim());
        let classifier = build_chain(spec.latent_dim(), &clf_widths, &mut rng);
        Ok(ClientModel {
            spec,
            encoder,
            classifier,
            pretext: None,
        })
    }

    /// Attach a freshly initialised v-way pretext head.
    pub fn attach_pretext_head(&mut self, v: usize, seed: &[u64]) {
        let mut rng = seeded_rng(seed);
        let mut widths = self.spec.classifier_hidden.clone();
        widths.push(v);
        self.pretext = Some(build_chain(self.spec.latent_dim(), &widths, &mut rng));
    }

    /// z = E(x).
    pub fn encode(&self, x: &Tensor2) -> Result<Tensor2> {
        let (z, _) = forward(&self.encoder, x)?;
        Ok(z)
    }

    /// Raw logits of the task head.
    pub fn logits(&self, x: &Tensor2) -> Result<Tensor2> {
        let z = self.encode(x)?;
        let (out, _) = forward(&self.classifier, &z)?;
        Ok(out)
    }

    /// Class probabilities (classification) or raw outputs (regression).
    pub fn predict(&self, x: &Tensor2) -> Result<Tensor2> {
        let out = self.logits(x)?;
        Ok(match self.spec.task {
            Task::Classification { .. } => softmax(&out),
            Task::Regression { .. } => out,
        })
    }

    /// Column means of the latent matrix — the client latent summary used
    /// for cross-client similarity.
    pub fn mean_latent(&self, x: &Tensor2) -> Result<Vec<f64>> {
        if x.rows() == 0 {
            return Err(Error::Data("mean_latent of empty input".into()));
        }
        self.encode(x)?.col_means()
    }

    pub fn encoder_params(&self) -> ParamSet {
        params_of_layers(&self.encoder, "e")
    }

    pub fn classifier_params(&self) -> ParamSet {
        params_of_layers(&self.classifier, "c")
    }

    pub fn pretext_params(&self) -> Option<ParamSet> {
        self.pretext.as_ref().map(|p| params_of_layers(p, "p"))
    }

    pub fn set_encoder_params(&mut self, ps: &ParamSet) -> Result<()> {
        set_layer_params(&mut self.encoder, ps, "e")
    }

    pub fn set_classifier_params(&mut self, ps: &ParamSet) -> Result<()> {
        set_layer_params(&mut self.classifier, ps, "c")
    }

    /// Full-model ParamSet (encoder + classifier blocks).
    pub fn full_params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        for (n, t) in self.encoder_params().entries() {
            ps.push(n.clone(), t.clone());
        }
        for (n, t) in self.classifier_params().entries() {
            ps.push(n.clone(), t.clone());
        }
        ps
    }

    pub fn set_full_params(&mut self, ps: &ParamSet) -> Result<()> {
        let enc_n = self.encoder.len() * 2;
        let mut enc = ParamSet::new();
        let mut clf = ParamSet::new();
        for (i, (n, t)) in ps.entries().iter().enumerate() {
            if i < enc_n {
                enc.push(n.clone(), t.clone());
            } else {
                clf.push(n.clone(), t.clone());
            }
        }
        self.set_encoder_params(&enc)?;
        self.set_classifier_params(&clf)
    }

    /// Loss and gradients of the encoder+classifier chain on a batch.
    pub fn supervised_grads(&self, x: &Tensor2, y: &Targets) -> Result<(f64, Vec<LayerGrad>, Vec<LayerGrad>)> {
        if x.rows() == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let (z, cache_e) = forward(&self.encoder, x)?;
        let (logits, cache_c) = forward(&self.classifier, &z)?;
        let (loss, dlogits) = loss_and_dlogits(&logits, y, self.spec.task.loss_spec())?;
        if !loss.is_finite() {
            return Err(Error::numeric("supervised loss", format!("non-finite loss {loss}")));
        }
        let (g_clf, dz) = backward(&self.classifier, &cache_c, &dlogits)?;
        let (g_enc, _) = backward(&self.encoder, &cache_e, &dz)?;
        Ok((loss, g_enc, g_clf))
    }

    /// One full-batch SGD epoch on the supervised objective; returns loss
    /// evaluated at the pre-step parameters.
    pub fn supervised_epoch(&mut self, x: &Tensor2, y: &Targets, lr: f64) -> Result<f64> {
        let (loss, g_enc, g_clf) = self.supervised_grads(x, y)?;
        apply_layer_grads(&mut self.encoder, &g_enc, lr);
        apply_layer_grads(&mut self.classifier, &g_clf, lr);
        Ok(loss)
    }

    /// Validation metric: accuracy in percent for classification, MAE for
    /// regression.
    pub fn eval_metric(&self, x: &Tensor2, y: &Targets) -> Result<f64> {
        if x.rows() == 0 {
            return Err(Error::Data("eval on empty set".into()));
        }
        let out = self.logits(x)?;
        match (&self.spec.task, y) {
            (Task::Classification { .. }, Targets::Classes(ys)) => {
                let mut hits = 0usize;
                for (r, &yy) in ys.iter().enumerate() {
                    let row = out.row(r);
                    let (mut best, mut bv) = (0usize, f64::NEG_INFINITY);
                    for (c, &v) in row.iter().enumerate() {
                        if v > bv {
                            bv = v;
                            best = c;
                        }
                    }
                    if best == yy {
                        hits += 1;
                    }
                }
                Ok(100.0 * hits as f64 / ys.len() as f64)
            }
            (Task::Regression { .. }, Targets::Values(ys)) => {
                let mae = ys
                    .iter()
                    .enumerate()
                    .map(|(r, &yy)| (out.get(r, 0) - yy).abs())
                    .sum::<f64>()
                    / ys.len() as f64;
                Ok(mae)
            }
            _ => Err(Error::Config("target kind does not match task".into())),
        }
    }
}

/// Seeded index split into (train, holdout) with the given holdout fraction.
pub fn split_indices(n: usize, holdout_frac: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_hold = ((n as f64) * holdout_frac).round() as usize;
    let hold = idx[..n_hold].to_vec();
    let train = idx[n_hold..].to_vec();
    (train, hold)
}

/// Result of the encoder-architecture search.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub spec: ModelSpec,
    /// Winning menu index.
    pub menu_index: usize,
    /// (menu index, validation metric) for every evaluated candidate.
    pub scores: Vec<(usize, f64)>,
    /// True when the dataset was too small to split and the training metric
    /// was used instead; surfaced in the round trace.
    pub used_train_metric: bool,
}

/// Select an encoder shape from a menu by short seeded training runs.
///
/// Evaluates `budget` menu entries (all of them when `budget >= menu.len()`)
/// on an internal 80/20 split and returns the best by validation metric;
/// ties break toward fewer parameters, then menu order.
pub fn search_encoder(
    x: &Tensor2,
    y: &Targets,
    task: Task,
    menu: &[Vec<usize>],
    budget: usize,
    epochs: usize,
    lr: f64,
    seed: &[u64],
) -> Result<SearchOutcome> {
    if menu.is_empty() {
        return Err(Error::Config("encoder menu must be nonempty".into()));
    }
    if budget == 0 {
        return Err(Error::Config("search budget must be at least 1".into()));
    }
    let n = x.rows();
    let mut rng = seeded_rng(&[seed, &[0x5ea2c4]].concat());
    let candidates: Vec<usize> = if budget >= menu.len() {
        (0..menu.len()).collect()
    } else {
        let mut all: Vec<usize> = (0..menu.len()).collect();
        all.shuffle(&mut rng);
        let mut picked = all[..budget].to_vec();
        picked.sort_unstable();
        picked
    };

    let too_small = n < 10;
    let (train_idx, val_idx) = if too_small {
        ((0..n).collect::<Vec<_>>(), (0..n).collect::<Vec<_>>())
    } else {
        let (tr, va) = split_indices(n, 0.2, &mut rng);
        (tr, va)
    };
    let (tx, ty) = (x.select_rows(&train_idx), y.select(&train_idx));
    let (vx, vy) = (x.select_rows(&val_idx), y.select(&val_idx));

    let mut scores = Vec::new();
    let mut best: Option<(usize, f64, usize)> = None; // (menu idx, metric, param count)
    for &ci in &candidates {
        let spec = ModelSpec::with_default_head(x.cols(), menu[ci].clone(), task)?;
        let mut model = ClientModel::init(spec.clone(), &[seed, &[ci as u64 + 1]].concat())?;
        for _ in 0..epochs {
            model.supervised_epoch(&tx, &ty, lr)?;
        }
        let metric = model.eval_metric(&vx, &vy)?;
        scores.push((ci, metric));
        let pc = spec.encoder_param_count();
        let replace = match &best {
            None => true,
            Some((_, bm, bpc)) => task.better(metric, *bm) || (metric == *bm && pc < *bpc),
        };
        if replace {
            best = Some((ci, metric, pc));
        }
    }
    let (menu_index, _, _) = best.expect("at least one candidate evaluated");
    Ok(SearchOutcome {
        spec: ModelSpec::with_default_head(x.cols(), menu[menu_index].clone(), task)?,
        menu_index,
        scores,
        used_train_metric: too_small,
    })
}

/// Convenience for tests: loss over a supervised batch without stepping.
pub fn supervised_loss(model: &ClientModel, x: &Tensor2, y: &Targets) -> Result<f64> {
    let (loss, _, _) = model.supervised_grads(x, y)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn identity_model(dim: usize, classes: usize) -> ClientModel {
        let spec = ModelSpec {
            input_dim: dim,
            encoder_widths: vec![dim],
            classifier_hidden: vec![dim],
            task: Task::Classification { classes },
        };
        let mut m = ClientModel::init(spec, &[0]).unwrap();
        m.encoder = vec![DenseLayer::new(Tensor2::eye(dim), vec![0.0; dim], Activation::Identity).unwrap()];
        m
    }

    #[test]
    fn identity_encoder_passes_input_through() {
        let m = identity_model(3, 2);
        let x = Tensor2::from_rows(&[vec![0.1, -0.4, 2.0]]).unwrap();
        assert_eq!(m.encode(&x).unwrap(), x);
    }

    #[test]
    fn zero_weight_encoder_gives_zero_latents() {
        let mut m = identity_model(3, 2);
        m.encoder[0].weight = Tensor2::zeros(3, 3);
        let x = Tensor2::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(m.encode(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_encoder_matches_reference_matmul_chain() {
        let spec = ModelSpec::with_default_head(4, vec![3, 2], Task::Classification { classes: 2 }).unwrap();
        let m = ClientModel::init(spec, &[42]).unwrap();
        let mut rng = seeded_rng(&[7]);
        let x = Tensor2::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let z = m.encode(&x).unwrap();
        // reference: relu layer then identity layer, straight loops
        for r in 0..3 {
            let mut h = vec![0.0f64; 3];
            for j in 0..3 {
                let mut s = m.encoder[0].bias[j];
                for i in 0..4 {
                    s += x.get(r, i) * m.encoder[0].weight.get(i, j);
                }
                h[j] = s.max(0.0);
            }
            for j in 0..2 {
                let mut s = m.encoder[1].bias[j];
                for i in 0..3 {
                    s += h[i] * m.encoder[1].weight.get(i, j);
                }
                assert!((z.get(r, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predict_rows_sum_to_one() {
        let spec = ModelSpec::with_default_head(5, vec![4, 3], Task::Classification { classes: 4 }).unwrap();
        let m = ClientModel::init(spec, &[1]).unwrap();
        let mut rng = seeded_rng(&[2]);
        let x = Tensor2::from_vec(6, 5, (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let p = m.predict(&x).unwrap();
        for r in 0..6 {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn predict_argmax_matches_logits_argmax() {
        let spec = ModelSpec::with_default_head(3, vec![3], Task::Classification { classes: 3 }).unwrap();
        let m = ClientModel::init(spec, &[5]).unwrap();
        let mut rng = seeded_rng(&[6]);
        let x = Tensor2::from_vec(4, 3, (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let logits = m.logits(&x).unwrap();
        let probs = m.predict(&x).unwrap();
        for r in 0..4 {
            let am = |row: &[f64]| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(am(logits.row(r)), am(probs.row(r)));
        }
    }

    #[test]
    fn regression_identity_stack_is_passthrough() {
        let spec = ModelSpec {
            input_dim: 1,
            encoder_widths: vec![1],
            classifier_hidden: vec![1],
            task: Task::Regression { loss: LossSpec::MeanSquaredError },
        };
        let mut m = ClientModel::init(spec, &[0]).unwrap();
        m.encoder = vec![DenseLayer::new(Tensor2::eye(1), vec![0.0], Activation::Identity).unwrap()];
        m.classifier = vec![
            DenseLayer::new(Tensor2::eye(1), vec![0.0], Activation::Identity).unwrap(),
            DenseLayer::new(Tensor2::eye(1), vec![0.0], Activation::Identity).unwrap(),
        ];
        let x = Tensor2::from_rows(&[vec![0.25], vec![-3.0]]).unwrap();
        assert_eq!(m.predict(&x).unwrap(), x);
    }

    #[test]
    fn mean_latent_single_row_and_symmetry() {
        let m = identity_model(2, 2);
        let one = Tensor2::from_rows(&[vec![0.3, -0.6]]).unwrap();
        assert_eq!(m.mean_latent(&one).unwrap(), vec![0.3, -0.6]);
        let sym = Tensor2::from_rows(&[vec![1.0, -2.0], vec![-1.0, 2.0]]).unwrap();
        assert_eq!(m.mean_latent(&sym).unwrap(), vec![0.0, 0.0]);
        assert!(m.mean_latent(&Tensor2::zeros(0, 2)).is_err());
    }

    #[test]
    fn mean_latent_matches_direct_recompute() {
        let spec = ModelSpec::with_default_head(4, vec![3], Task::Classification { classes: 2 }).unwrap();
        let m = ClientModel::init(spec, &[11]).unwrap();
        let mut rng = seeded_rng(&[12]);
        let x = Tensor2::from_vec(7, 4, (0..28).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let z = m.encode(&x).unwrap();
        let ml = m.mean_latent(&x).unwrap();
        for c in 0..3 {
            let mut s = 0.0;
            for r in 0..7 {
                s += z.get(r, c);
            }
            assert!((ml[c] - s / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_equals_classifier_forward_of_encode() {
        let spec = ModelSpec::with_default_head(4, vec![3, 2], Task::Classification { classes: 3 }).unwrap();
        let m = ClientModel::init(spec, &[21]).unwrap();
        let mut rng = seeded_rng(&[22]);
        let x = Tensor2::from_vec(5, 4, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let z = m.encode(&x).unwrap();
        let (raw, _) = forward(&m.classifier, &z).unwrap();
        assert_eq!(m.logits(&x).unwrap(), raw);
    }

    #[test]
    fn search_single_entry_menu_returns_it() {
        let mut rng = seeded_rng(&[31]);
        let x = Tensor2::from_vec(20, 3, (0..60).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let y = Targets::Classes((0..20).map(|_| rng.gen_range(0..2usize)).collect());
        let menu = vec![vec![2]];
        let out = search_encoder(&x, &y, Task::Classification { classes: 2 }, &menu, 5, 3, 0.1, &[0]).unwrap();
        assert_eq!(out.menu_index, 0);
        assert_eq!(out.spec.encoder_widths, vec![2]);
    }

    #[test]
    fn search_budget_beyond_menu_is_exhaustive() {
        let mut rng = seeded_rng(&[32]);
        let x = Tensor2::from_vec(30, 3, (0..90).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let y = Targets::Classes((0..30).map(|_| rng.gen_range(0..2usize)).collect());
        let menu = vec![vec![2], vec![4, 2], vec![6, 2]];
        let out = search_encoder(&x, &y, Task::Classification { classes: 2 }, &menu, 100, 3, 0.1, &[0]).unwrap();
        assert_eq!(out.scores.len(), 3);
    }

    #[test]
    fn search_tiny_dataset_flags_train_metric() {
        let x = Tensor2::from_rows(&[vec![0.1, 0.2], vec![0.9, 0.8], vec![0.2, 0.1], vec![0.8, 0.9]]).unwrap();
        let y = Targets::Classes(vec![0, 1, 0, 1]);
        let out = search_encoder(&x, &y, Task::Classification { classes: 2 }, &[vec![2]], 1, 5, 0.1, &[0]).unwrap();
        assert!(out.used_train_metric);
    }

    #[test]
    fn search_is_deterministic() {
        let mut rng = seeded_rng(&[33]);
        let x = Tensor2::from_vec(40, 4, (0..160).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let y = Targets::Classes((0..40).map(|_| rng.gen_range(0..3usize)).collect());
        let menu = vec![vec![3], vec![6, 3], vec![8, 4, 3]];
        let a = search_encoder(&x, &y, Task::Classification { classes: 3 }, &menu, 2, 4, 0.1, &[9]).unwrap();
        let b = search_encoder(&x, &y, Task::Classification { classes: 3 }, &menu, 2, 4, 0.1, &[9]).unwrap();
        assert_eq!(a.menu_index, b.menu_index);
        assert_eq!(a.scores, b.scores);
    }
}
