//! The personalized low-rank projector.
//!
//! A frozen affine map `hW + b` is augmented with two low-rank paths that
//! share one output factor:
//!
//! ```text
//! h' = hW + b + s · (h·W_task_in + p·W_person_in) · W_out,    s = alpha_r / r
//! ```
//!
//! `W_out` starts at zero and user embeddings `p` start at zero, so a fresh
//! layer is exactly the frozen projector. Once trained, both paths can be
//! folded into `W` and `b` for plain affine inference, and the user term in
//! `b` can be swapped for another user's by subtract-and-add.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng, Vector};

#[derive(Clone, Debug, PartialEq)]
pub struct PLoRAConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub d_p: usize,
    /// Scale numerator; the adapter term is multiplied by `alpha_r / rank`.
    pub alpha_r: f64,
    pub init_std: f64,
}

impl Default for PLoRAConfig {
    fn default() -> Self {
        Self {
            d_in: 32,
            d_out: 32,
            rank: 4,
            d_p: 8,
            alpha_r: 8.0,
            init_std: 0.02,
        }
    }
}

impl PLoRAConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.rank >= self.d_in.min(self.d_out) {
            return Err(Error::Parameter(format!(
                "rank must satisfy 1 <= r < min(d_in, d_out) = {}, got {}",
                self.d_in.min(self.d_out),
                self.rank
            )));
        }
        if self.d_p == 0 {
            return Err(Error::Parameter("d_p must be >= 1".into()));
        }
        if !(self.alpha_r > 0.0) {
            return Err(Error::Parameter(format!(
                "alpha_r must be > 0, got {}",
                self.alpha_r
            )));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Parameter(format!(
                "init_std must be > 0, got {}",
                self.init_std
            )));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha_r / self.rank as f64
    }

    /// `d_in·r + r·d_out + d_p·r`; the shared output factor counts once.
    pub fn trainable_count(&self) -> usize {
        self.d_in * self.rank + self.rank * self.d_out + self.d_p * self.rank
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MergeState {
    Clean,
    /// Task path folded into `W`; no user term in `b`.
    MergedGeneric,
    /// Task path folded into `W`; this embedding's term folded into `b`.
    MergedForUser(Vector),
}

impl MergeState {
    pub fn is_clean(&self) -> bool {
        matches!(self, MergeState::Clean)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradients {
    pub task_in: Matrix,
    pub shared_out: Matrix,
    pub person_in: Matrix,
    pub p: Vector,
}

impl LayerGradients {
    pub fn zeros(cfg: &PLoRAConfig) -> Self {
        Self {
            task_in: Matrix::zeros(cfg.d_in, cfg.rank),
            shared_out: Matrix::zeros(cfg.rank, cfg.d_out),
            person_in: Matrix::zeros(cfg.d_p, cfg.rank),
            p: Vector::zeros(cfg.d_p),
        }
    }

    pub fn accumulate(&mut self, other: &LayerGradients) -> Result<()> {
        self.task_in.add_assign(&other.task_in)?;
        self.shared_out.add_assign(&other.shared_out)?;
        self.person_in.add_assign(&other.person_in)?;
        self.p.axpy(1.0, &other.p)
    }

    pub fn is_zero(&self) -> bool {
        self.task_in.is_zero()
            && self.shared_out.is_zero()
            && self.person_in.is_zero()
            && self.p.is_zero()
    }
}

/// Gradients of the adapter parameters plus the gradient with respect to the
/// layer input, for chaining into earlier layers.
#[derive(Clone, Debug)]
pub struct LayerBackward {
    pub grads: LayerGradients,
    pub grad_h: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PLoRALinear {
    config: PLoRAConfig,
    weight: Matrix,
    bias: Vector,
    task_in: Matrix,
    shared_out: Matrix,
    person_in: Matrix,
    state: MergeState,
}

impl PLoRALinear {
    /// Wraps a frozen projector. `W_task_in` and `W_person_in` are drawn from
    /// `N(0, init_std^2)`; the shared output factor starts at zero.
    pub fn new(config: PLoRAConfig, weight: Matrix, bias: Vector, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let task_in = Matrix::gaussian(config.d_in, config.rank, config.init_std, rng)?;
        let person_in = Matrix::gaussian(config.d_p, config.rank, config.init_std, rng)?;
        let shared_out = Matrix::zeros(config.rank, config.d_out);
        Self::from_parts(config, weight, bias, task_in, shared_out, person_in, MergeState::Clean)
    }

    /// Frozen projector with `N(0, base_std^2)` weights and zero bias.
    pub fn with_random_base(config: PLoRAConfig, base_std: f64, rng: &mut Rng) -> Result<Self> {
        let weight = Matrix::gaussian(config.d_in, config.d_out, base_std, rng)?;
        let bias = Vector::zeros(config.d_out);
        Self::new(config, weight, bias, rng)
    }

    pub fn from_parts(
        config: PLoRAConfig,
        weight: Matrix,
        bias: Vector,
        task_in: Matrix,
        shared_out: Matrix,
        person_in: Matrix,
        state: MergeState,
    ) -> Result<Self> {
        config.validate()?;
        let expect = |name: &'static str, m: &Matrix, shape: (usize, usize)| {
            if m.shape() != shape {
                Err(Error::dim(name, m.shape(), shape))
            } else {
                Ok(())
            }
        };
        expect("weight", &weight, (config.d_in, config.d_out))?;
        expect("task_in", &task_in, (config.d_in, config.rank))?;
        expect("shared_out", &shared_out, (config.rank, config.d_out))?;
        expect("person_in", &person_in, (config.d_p, config.rank))?;
        if bias.len() != config.d_out {
            return Err(Error::dim("bias", (1, bias.len()), (1, config.d_out)));
        }
        if let MergeState::MergedForUser(p) = &state {
            if p.len() != config.d_p {
                return Err(Error::dim("merged embedding", (1, p.len()), (1, config.d_p)));
            }
        }
        Ok(Self {
            config,
            weight,
            bias,
            task_in,
            shared_out,
            person_in,
            state,
        })
    }

    pub fn config(&self) -> &PLoRAConfig {
        &self.config
    }

    pub fn scale(&self) -> f64 {
        self.config.scale()
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &Vector {
        &self.bias
    }

    pub fn task_in(&self) -> &Matrix {
        &self.task_in
    }

    pub fn shared_out(&self) -> &Matrix {
        &self.shared_out
    }

    pub fn person_in(&self) -> &Matrix {
        &self.person_in
    }

    pub fn task_in_mut(&mut self) -> &mut Matrix {
        &mut self.task_in
    }

    pub fn shared_out_mut(&mut self) -> &mut Matrix {
        &mut self.shared_out
    }

    pub fn person_in_mut(&mut self) -> &mut Matrix {
        &mut self.person_in
    }

    pub fn merge_state(&self) -> &MergeState {
        &self.state
    }

    pub fn count_trainable(&self) -> usize {
        self.config.trainable_count()
    }

    /// Parameters of the frozen projector, `d_in·d_out + d_out`.
    pub fn count_frozen(&self) -> usize {
        self.config.d_in * self.config.d_out + self.config.d_out
    }

    fn require_clean(&self, op: &str) -> Result<()> {
        if self.state.is_clean() {
            Ok(())
        } else {
            Err(Error::State(format!(
                "{op} is undefined while adapters are folded into the projector"
            )))
        }
    }

    fn check_input(&self, h: &Matrix) -> Result<()> {
        if h.cols() != self.config.d_in {
            return Err(Error::dim("plora input", h.shape(), (h.rows(), self.config.d_in)));
        }
        Ok(())
    }

    fn check_embedding(&self, p: &Vector) -> Result<()> {
        if p.len() != self.config.d_p {
            return Err(Error::dim("user embedding", (1, p.len()), (1, self.config.d_p)));
        }
        Ok(())
    }

    /// `hW + b` using whatever is currently stored in `W` and `b`.
    pub fn affine(&self, h: &Matrix) -> Result<Matrix> {
        self.check_input(h)?;
        let mut out = h.matmul(&self.weight)?;
        out.add_row_broadcast(self.bias.as_slice())?;
        Ok(out)
    }

    /// Rank-space activations `hW_task_in + pW_person_in`, one row per input row.
    fn low_rank_input(&self, h: &Matrix, p: &Vector) -> Result<Matrix> {
        let mut z = h.matmul(&self.task_in)?;
        if !p.is_zero() {
            let pz = p.to_row().matmul(&self.person_in)?;
            z.add_row_broadcast(pz.data())?;
        }
        Ok(z)
    }

    /// Forward pass for a batch of rows `h` sharing one user embedding `p`
    /// (a token sequence from one sample, or a single vector as a 1-row
    /// matrix). With `p = 0` the person path contributes nothing and
    /// `W_person_in` is never read.
    pub fn forward(&self, h: &Matrix, p: &Vector) -> Result<Matrix> {
        self.require_clean("forward")?;
        self.check_input(h)?;
        self.check_embedding(p)?;
        let z = self.low_rank_input(h, p)?;
        let mut out = self.affine(h)?;
        out.axpy(self.scale(), &z.matmul(&self.shared_out)?)?;
        Ok(out)
    }

    pub fn forward_vec(&self, h: &Vector, p: &Vector) -> Result<Vector> {
        Ok(Vector::from_matrix(self.forward(&h.to_row(), p)?))
    }

    /// Forward pass with a separate embedding per row (`ps` is `n x d_p`).
    pub fn forward_rows(&self, h: &Matrix, ps: &Matrix) -> Result<Matrix> {
        self.require_clean("forward")?;
        self.check_input(h)?;
        if ps.rows() != h.rows() || ps.cols() != self.config.d_p {
            return Err(Error::dim("row embeddings", ps.shape(), (h.rows(), self.config.d_p)));
        }
        let mut z = h.matmul(&self.task_in)?;
        z.add_assign(&ps.matmul(&self.person_in)?)?;
        let mut out = self.affine(h)?;
        out.axpy(self.scale(), &z.matmul(&self.shared_out)?)?;
        Ok(out)
    }

    /// Exact gradients of `<upstream, forward(h, p)>`.
    ///
    /// With `z = hW_task_in + pW_person_in` and `G = upstream`:
    ///
    /// ```text
    /// dW_out       = s zᵀ G                 (both paths feed the shared factor)
    /// dz           = s G W_outᵀ
    /// dW_task_in   = hᵀ dz
    /// dW_person_in = pᵀ Σ_rows dz
    /// dp           = (Σ_rows dz) W_person_inᵀ
    /// dh           = G Wᵀ + dz W_task_inᵀ
    /// ```
    pub fn backward(&self, h: &Matrix, p: &Vector, upstream: &Matrix) -> Result<LayerBackward> {
        self.require_clean("backward")?;
        self.check_input(h)?;
        self.check_embedding(p)?;
        if upstream.shape() != (h.rows(), self.config.d_out) {
            return Err(Error::dim(
                "plora upstream",
                upstream.shape(),
                (h.rows(), self.config.d_out),
            ));
        }
        let s = self.scale();
        let z = self.low_rank_input(h, p)?;
        let mut shared_out = z.t_matmul(upstream)?;
        shared_out.scale(s);
        let mut dz = upstream.matmul_t(&self.shared_out)?;
        dz.scale(s);
        let task_in = h.t_matmul(&dz)?;
        let dz_sum = dz.column_sums();
        let person_in = p.to_row().t_matmul(&dz_sum.to_row())?;
        let gp = Vector::from_matrix(dz_sum.to_row().matmul_t(&self.person_in)?);
        let mut grad_h = upstream.matmul_t(&self.weight)?;
        grad_h.add_assign(&dz.matmul_t(&self.task_in)?)?;
        Ok(LayerBackward {
            grads: LayerGradients {
                task_in,
                shared_out,
                person_in,
                p: gp,
            },
            grad_h,
        })
    }

    fn task_delta(&self) -> Result<Matrix> {
        Ok(self.task_in.matmul(&self.shared_out)?.scaled(self.scale()))
    }

    fn person_delta(&self, p: &Vector) -> Result<Matrix> {
        Ok(p
            .to_row()
            .matmul(&self.person_in)?
            .matmul(&self.shared_out)?
            .scaled(self.scale()))
    }

    fn add_to_bias(&mut self, alpha: f64, delta: &Matrix) {
        for (b, d) in self.bias.as_mut_slice().iter_mut().zip(delta.data()) {
            *b += alpha * d;
        }
    }

    /// Folds the task path into `W` and, for non-zero `p`, the user term into
    /// `b`. Afterwards [`affine`](Self::affine) reproduces `forward(h, p)`.
    pub fn merge_for_user(&mut self, p: &Vector) -> Result<()> {
        if !self.state.is_clean() {
            return Err(Error::State("layer is already merged".into()));
        }
        self.check_embedding(p)?;
        let dw = self.task_delta()?;
        self.weight.add_assign(&dw)?;
        if p.is_zero() {
            self.state = MergeState::MergedGeneric;
        } else {
            let db = self.person_delta(p)?;
            self.add_to_bias(1.0, &db);
            self.state = MergeState::MergedForUser(p.clone());
        }
        Ok(())
    }

    /// The embedding currently folded into `b` (zero for a generic merge).
    pub fn folded_embedding(&self) -> Option<Vector> {
        match &self.state {
            MergeState::Clean => None,
            MergeState::MergedGeneric => Some(Vector::zeros(self.config.d_p)),
            MergeState::MergedForUser(p) => Some(p.clone()),
        }
    }

    /// Subtracts everything [`merge_for_user`](Self::merge_for_user) added.
    pub fn unmerge(&mut self) -> Result<()> {
        let folded = self
            .folded_embedding()
            .ok_or_else(|| Error::State("layer is not merged".into()))?;
        let dw = self.task_delta()?;
        self.weight.axpy(-1.0, &dw)?;
        if !folded.is_zero() {
            let db = self.person_delta(&folded)?;
            self.add_to_bias(-1.0, &db);
        }
        self.state = MergeState::Clean;
        Ok(())
    }

    /// Re-targets the folded bias from `from` to `to`; `W` is untouched.
    /// `from` must be the embedding that is currently folded in.
    pub fn switch_user(&mut self, from: &Vector, to: &Vector) -> Result<()> {
        let folded = self
            .folded_embedding()
            .ok_or_else(|| Error::State("switch_user needs a merged layer".into()))?;
        self.check_embedding(from)?;
        self.check_embedding(to)?;
        if folded != *from {
            return Err(Error::State(
                "`from` embedding does not match the folded user".into(),
            ));
        }
        if !from.is_zero() {
            let db = self.person_delta(from)?;
            self.add_to_bias(-1.0, &db);
        }
        if to.is_zero() {
            self.state = MergeState::MergedGeneric;
        } else {
            let db = self.person_delta(to)?;
            self.add_to_bias(1.0, &db);
            self.state = MergeState::MergedForUser(to.clone());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{finite_diff_grad, max_rel_error};

    fn cfg(d_in: usize, d_out: usize, rank: usize, d_p: usize) -> PLoRAConfig {
        PLoRAConfig {
            d_in,
            d_out,
            rank,
            d_p,
            alpha_r: 2.0 * rank as f64,
            init_std: 0.3,
        }
    }

    /// Random layer with a non-zero shared factor, as after some training.
    fn trained_layer(c: &PLoRAConfig, rng: &mut Rng) -> PLoRALinear {
        let mut layer = PLoRALinear::with_random_base(c.clone(), 0.5, rng).unwrap();
        *layer.shared_out_mut() = Matrix::gaussian(c.rank, c.d_out, 0.5, rng).unwrap();
        layer.bias = Vector::gaussian(c.d_out, 0.5, rng).unwrap();
        layer
    }

    fn hand_layer() -> PLoRALinear {
        let c = PLoRAConfig {
            d_in: 2,
            d_out: 2,
            rank: 1,
            d_p: 1,
            alpha_r: 1.0,
            init_std: 1.0,
        };
        PLoRALinear::from_parts(
            c,
            Matrix::identity(2),
            Vector::zeros(2),
            Matrix::from_rows(&[&[1.0], &[0.0]]).unwrap(),
            Matrix::from_rows(&[&[0.0, 1.0]]).unwrap(),
            Matrix::from_rows(&[&[1.0]]).unwrap(),
            MergeState::Clean,
        )
        .unwrap()
    }

    #[test]
    fn config_rejects_full_rank() {
        let mut c = PLoRAConfig {
            rank: 32,
            ..PLoRAConfig::default()
        };
        assert!(c.validate().is_err());
        c.rank = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn hand_evaluation() {
        let layer = hand_layer();
        let h = Vector::from_vec(vec![1.0, 0.0]).unwrap();
        let p = Vector::from_vec(vec![2.0]).unwrap();
        let out = layer.forward_vec(&h, &p).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 3.0]);
    }

    #[test]
    fn fresh_layer_is_the_frozen_projector() {
        let mut rng = Rng::new(1);
        let c = cfg(6, 5, 2, 3);
        let layer = PLoRALinear::with_random_base(c.clone(), 0.5, &mut rng).unwrap();
        assert!(layer.shared_out().is_zero());
        for _ in 0..20 {
            let h = Matrix::gaussian(4, 6, 1.0, &mut rng).unwrap();
            let p = Vector::gaussian(3, 1.0, &mut rng).unwrap();
            assert_eq!(layer.forward(&h, &p).unwrap(), layer.affine(&h).unwrap());
        }
    }

    #[test]
    fn zero_embedding_gives_task_path_only() {
        let mut rng = Rng::new(2);
        let c = cfg(6, 5, 2, 3);
        let layer = trained_layer(&c, &mut rng);
        let h = Matrix::gaussian(3, 6, 1.0, &mut rng).unwrap();
        let out = layer.forward(&h, &Vector::zeros(3)).unwrap();
        let mut expected = layer.affine(&h).unwrap();
        let lora = h.matmul(layer.task_in()).unwrap().matmul(layer.shared_out()).unwrap();
        expected.axpy(layer.scale(), &lora).unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn zero_embedding_ignores_person_in_bitwise() {
        let mut rng = Rng::new(3);
        let c = cfg(6, 5, 2, 3);
        let layer = trained_layer(&c, &mut rng);
        let mut other = layer.clone();
        *other.person_in_mut() = Matrix::gaussian(3, 2, 9.0, &mut rng).unwrap();
        let h = Matrix::gaussian(3, 6, 1.0, &mut rng).unwrap();
        let p = Vector::zeros(3);
        assert_eq!(layer.forward(&h, &p).unwrap(), other.forward(&h, &p).unwrap());
    }

    #[test]
    fn forward_rows_matches_per_row_forward() {
        let mut rng = Rng::new(4);
        let c = cfg(6, 5, 2, 3);
        let layer = trained_layer(&c, &mut rng);
        let h = Matrix::gaussian(4, 6, 1.0, &mut rng).unwrap();
        let ps = Matrix::gaussian(4, 3, 1.0, &mut rng).unwrap();
        let batched = layer.forward_rows(&h, &ps).unwrap();
        for r in 0..4 {
            let hr = Vector::from_vec(h.row(r).to_vec()).unwrap();
            let pr = Vector::from_vec(ps.row(r).to_vec()).unwrap();
            let single = layer.forward_vec(&hr, &pr).unwrap();
            let diff = crate::linalg::max_abs_diff(batched.row(r), single.as_slice());
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn fresh_layer_gradients_unlock_zero_params() {
        let mut rng = Rng::new(5);
        let c = cfg(6, 5, 2, 3);
        let layer = PLoRALinear::with_random_base(c, 0.5, &mut rng).unwrap();
        let h = Matrix::gaussian(2, 6, 1.0, &mut rng).unwrap();
        let g = Matrix::gaussian(2, 5, 1.0, &mut rng).unwrap();
        let back = layer.backward(&h, &Vector::zeros(3), &g).unwrap();
        assert!(back.grads.task_in.is_zero());
        assert!(back.grads.p.is_zero());
        assert!(!back.grads.shared_out.is_zero());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(6);
        let c = cfg(6, 5, 2, 3);
        let layer = trained_layer(&c, &mut rng);
        let h = Matrix::gaussian(2, 6, 1.0, &mut rng).unwrap();
        let p = Vector::gaussian(3, 1.0, &mut rng).unwrap();
        let back = layer.backward(&h, &p, &Matrix::zeros(2, 5)).unwrap();
        assert!(back.grads.is_zero());
        assert!(back.grad_h.is_zero());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(7);
        let c = cfg(5, 4, 2, 3);
        for _ in 0..10 {
            let layer = trained_layer(&c, &mut rng);
            let h = Matrix::gaussian(3, 5, 1.0, &mut rng).unwrap();
            let p = Vector::gaussian(3, 1.0, &mut rng).unwrap();
            let g = Matrix::gaussian(3, 4, 1.0, &mut rng).unwrap();
            let back = layer.backward(&h, &p, &g).unwrap();
            let loss = |l: &PLoRALinear, h: &Matrix, p: &Vector| {
                crate::linalg::dot(l.forward(h, p).unwrap().data(), g.data())
            };
            let num = finite_diff_grad(
                |m| {
                    let mut l = layer.clone();
                    *l.shared_out_mut() = m.clone();
                    loss(&l, &h, &p)
                },
                layer.shared_out(),
                1e-6,
            )
            .unwrap();
            assert!(max_rel_error(back.grads.shared_out.data(), num.data(), 1e-8) < 1e-4);
            let num = finite_diff_grad(
                |m| loss(&layer, m, &p),
                &h,
                1e-6,
            )
            .unwrap();
            assert!(max_rel_error(back.grad_h.data(), num.data(), 1e-8) < 1e-4);
        }
    }

    #[test]
    fn merge_reproduces_forward_and_unmerge_restores() {
        let mut rng = Rng::new(8);
        let c = cfg(6, 5, 2, 3);
        let layer = trained_layer(&c, &mut rng);
        let p = Vector::gaussian(3, 1.0, &mut rng).unwrap();
        let h = Matrix::gaussian(7, 6, 1.0, &mut rng).unwrap();
        let expected = layer.forward(&h, &p).unwrap();
        let mut merged = layer.clone();
        merged.merge_for_user(&p).unwrap();
        assert_eq!(merged.merge_state(), &MergeState::MergedForUser(p.clone()));
        assert!(merged.affine(&h).unwrap().max_abs_diff(&expected) < 1e-10);
        assert!(matches!(merged.forward(&h, &p), Err(Error::State(_))));
        assert!(matches!(merged.merge_for_user(&p), Err(Error::State(_))));
        merged.unmerge().unwrap();
        assert!(merged.weight().max_abs_diff(layer.weight()) < 1e-10);
        assert!(merged.bias().max_abs_diff(layer.bias()) < 1e-10);
        assert!(merged.merge_state().is_clean());
    }

    #[test]
    fn generic_merge_leaves_bias() {
        let mut rng = Rng::new(9);
        let c = cfg(6, 5, 2, 3);
        let mut layer = trained_layer(&c, &mut rng);
        let b = layer.bias().clone();
        layer.merge_for_user(&Vector::zeros(3)).unwrap();
        assert_eq!(layer.bias(), &b);
        assert_eq!(layer.merge_state(), &MergeState::MergedGeneric);
    }

    #[test]
    fn switch_user_algebra() {
        let mut rng = Rng::new(10);
        let c = cfg(6, 5, 2, 3);
        let layer = trained_layer(&c, &mut rng);
        let p1 = Vector::gaussian(3, 1.0, &mut rng).unwrap();
        let p2 = Vector::gaussian(3, 1.0, &mut rng).unwrap();

        let mut a = layer.clone();
        a.merge_for_user(&p1).unwrap();
        let b_before = a.bias().clone();
        a.switch_user(&p1, &p1).unwrap();
        assert!(a.bias().max_abs_diff(&b_before) < 1e-14);

        a.switch_user(&p1, &p2).unwrap();
        let mut b = layer.clone();
        b.merge_for_user(&p2).unwrap();
        assert!(a.bias().max_abs_diff(b.bias()) < 1e-10);
        assert_eq!(a.weight(), b.weight());

        a.switch_user(&p2, &Vector::zeros(3)).unwrap();
        let h = Matrix::gaussian(3, 6, 1.0, &mut rng).unwrap();
        let generic = layer.forward(&h, &Vector::zeros(3)).unwrap();
        assert!(a.affine(&h).unwrap().max_abs_diff(&generic) < 1e-10);
        assert_eq!(a.merge_state(), &MergeState::MergedGeneric);
    }

    #[test]
    fn switch_user_requires_merge_and_matching_source() {
        let mut rng = Rng::new(11);
        let c = cfg(6, 5, 2, 3);
        let mut layer = trained_layer(&c, &mut rng);
        let p = Vector::gaussian(3, 1.0, &mut rng).unwrap();
        assert!(matches!(layer.switch_user(&p, &p), Err(Error::State(_))));
        layer.merge_for_user(&p).unwrap();
        assert!(layer.switch_user(&Vector::zeros(3), &p).is_err());
    }

    #[test]
    fn trainable_count() {
        let c = PLoRAConfig {
            d_in: 32,
            d_out: 32,
            rank: 4,
            d_p: 8,
            ..PLoRAConfig::default()
        };
        assert_eq!(c.trainable_count(), 288);
        let doubled = PLoRAConfig { rank: 8, ..c.clone() };
        assert_eq!(doubled.trainable_count(), 2 * 288);
        let layer = PLoRALinear::with_random_base(c, 0.1, &mut Rng::new(0)).unwrap();
        assert_eq!(layer.count_trainable(), 288);
        assert_eq!(layer.count_frozen(), 32 * 32 + 32);
    }
}
