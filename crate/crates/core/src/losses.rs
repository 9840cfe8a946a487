//! Training objectives. Every loss is available as a tape op (`*_op`) and as a
//! plain function on tensors.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::jdm;
use crate::sdf::{self, SignedDistanceGrid};
use crate::tensor::Tensor;

/// Probabilities are kept inside `[PROB_CLAMP, 1 − PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub rec: f64,
    pub cyc: f64,
    pub adv: f64,
    pub jdm: f64,
    pub pen: f64,
    pub sem: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 10.0,
            cyc: 1.0,
            adv: 0.1,
            jdm: 1.0,
            pen: 1.0,
            sem: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.rec, self.cyc, self.adv, self.jdm, self.pen, self.sem];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and nonnegative: {all:?}")));
        }
        Ok(())
    }
}

/// Penetration-weight schedule for fine-tuning: linear from `start` at epoch 1
/// to `peak` at epoch `ramp_epochs`, then back to `start`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenRamp {
    pub start: f64,
    pub peak: f64,
    pub ramp_epochs: usize,
}

impl Default for PenRamp {
    fn default() -> Self {
        Self {
            start: 1.0,
            peak: 10.0,
            ramp_epochs: 5,
        }
    }
}

impl PenRamp {
    /// Multiplier on λ_p for a 1-based epoch.
    pub fn factor(&self, epoch: usize) -> f64 {
        if epoch == 0 || epoch > self.ramp_epochs {
            return self.start;
        }
        if self.ramp_epochs == 1 {
            return self.peak;
        }
        let s = (epoch - 1) as f64 / (self.ramp_epochs - 1) as f64;
        self.start + (self.peak - self.start) * s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvConvention {
    /// `Σ log(1 − p)`; minimizing it pushes outputs toward being judged fake.
    Paper,
    /// `−Σ log p`.
    #[default]
    Nonsaturating,
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: shapes {:?} and {:?} differ",
            g.value(a).shape(),
            g.value(b).shape()
        )));
    }
    Ok(())
}

fn squared_distance_op(g: &mut Graph, a: Var, b: Var, what: &str) -> Result<Var> {
    same_shape(g, a, b, what)?;
    let d = g.sub(a, b);
    Ok(g.sum_squares(d))
}

/// `Σ_t ‖Q̂_t − Q_t‖²`.
pub fn rec_loss_op(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    squared_distance_op(g, pred, target, "rec_loss")
}

/// Same form as [`rec_loss_op`], applied to the A→B→A reconstruction.
pub fn cyc_loss_op(g: &mut Graph, cycled: Var, target: Var) -> Result<Var> {
    squared_distance_op(g, cycled, target, "cyc_loss")
}

/// `Σ_t ‖E_A,t − E_B,t‖²`.
pub fn sem_loss_op(g: &mut Graph, ea: Var, eb: Var) -> Result<Var> {
    squared_distance_op(g, ea, eb, "sem_loss")
}

/// `Σ_t ‖η(D_A,t) − η(D_B,t)‖²_F` for positions `[..., N, 3]`.
pub fn jdm_loss_op(g: &mut Graph, pa: Var, pb: Var) -> Result<Var> {
    same_shape(g, pa, pb, "jdm_loss")?;
    let ea = jdm::normalized_jdm_op(g, pa)?;
    let eb = jdm::normalized_jdm_op(g, pb)?;
    let d = g.sub(ea, eb);
    Ok(g.sum_squares(d))
}

fn clamped_probs(g: &mut Graph, p: Var) -> Var {
    let v = g.value(p);
    let data = v.data().iter().map(|x| x.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)).collect();
    g.custom(
        Tensor::new(v.shape().to_vec(), data),
        &[p],
        Box::new(|grad, parents, _| {
            let d = grad
                .data()
                .iter()
                .zip(parents[0].data())
                .map(|(g, x)| if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(x) { *g } else { 0.0 })
                .collect();
            vec![Some(Tensor::new(parents[0].shape().to_vec(), d))]
        }),
    )
}

/// Generator adversarial term over discriminator outputs on retargeted frames.
pub fn adv_loss_generator_op(g: &mut Graph, probs: Var, convention: AdvConvention) -> Var {
    let p = clamped_probs(g, probs);
    match convention {
        AdvConvention::Paper => {
            let q = g.affine(p, -1.0, 1.0);
            let l = g.ln(q);
            g.sum(l)
        }
        AdvConvention::Nonsaturating => {
            let l = g.ln(p);
            let s = g.sum(l);
            g.scale(s, -1.0)
        }
    }
}

/// Binary cross-entropy: `−Σ log(real) − Σ log(1 − fake)`.
pub fn adv_loss_discriminator_op(g: &mut Graph, real: Var, fake: Var) -> Var {
    let r = clamped_probs(g, real);
    let f = clamped_probs(g, fake);
    let lr = g.ln(r);
    let sr = g.sum(lr);
    let q = g.affine(f, -1.0, 1.0);
    let lf = g.ln(q);
    let sf = g.sum(lf);
    g.weighted_sum(&[(sr, -1.0), (sf, -1.0)])
}

/// `Σ ReLU(−Φ(v))` over limb vertices `[..., 3]` given in the grid's frame.
pub fn pen_loss_op(g: &mut Graph, grid: &Arc<SignedDistanceGrid>, points: Var) -> Result<Var> {
    let phi = sdf::sdf_query_op(g, points, grid)?;
    let neg = g.scale(phi, -1.0);
    let r = g.relu(neg);
    Ok(g.sum(r))
}

fn eval2(a: &Tensor, b: &Tensor, f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let l = f(&mut g, va, vb)?;
    Ok(g.scalar(l))
}

pub fn rec_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    eval2(pred, target, rec_loss_op)
}

pub fn cyc_loss(cycled: &Tensor, target: &Tensor) -> Result<f64> {
    eval2(cycled, target, cyc_loss_op)
}

pub fn sem_loss(ea: &Tensor, eb: &Tensor) -> Result<f64> {
    eval2(ea, eb, sem_loss_op)
}

pub fn jdm_loss(pa: &Tensor, pb: &Tensor) -> Result<f64> {
    eval2(pa, pb, jdm_loss_op)
}

pub fn adv_loss_generator(probs: &[f64], convention: AdvConvention) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(Tensor::new([probs.len()], probs.to_vec()));
    let l = adv_loss_generator_op(&mut g, p, convention);
    g.scalar(l)
}

pub fn adv_loss_discriminator(real: &[f64], fake: &[f64]) -> f64 {
    let mut g = Graph::new();
    let r = g.constant(Tensor::new([real.len()], real.to_vec()));
    let f = g.constant(Tensor::new([fake.len()], fake.to_vec()));
    let l = adv_loss_discriminator_op(&mut g, r, f);
    g.scalar(l)
}

/// `points` is `[K, 3]` (or any `[..., 3]`).
pub fn pen_loss(grid: &Arc<SignedDistanceGrid>, points: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(points.clone());
    let l = pen_loss_op(&mut g, grid, p)?;
    Ok(g.scalar(l))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainParts {
    pub rec: f64,
    pub cyc: f64,
    pub adv: f64,
    pub jdm: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneParts {
    pub sem: f64,
    pub pen: f64,
}

/// `λ_r L_rec + λ_c L_cyc + λ_a L_adv + λ_j L_jdm`.
pub fn total_pretrain_loss(parts: &PretrainParts, w: &LossWeights) -> f64 {
    w.rec * parts.rec + w.cyc * parts.cyc + w.adv * parts.adv + w.jdm * parts.jdm
}

/// `λ_s L_sem + λ_p L_pen`.
pub fn total_finetune_loss(parts: &FinetuneParts, w: &LossWeights) -> f64 {
    w.sem * parts.sem + w.pen * parts.pen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, relative_error};

    fn grad_check(inputs: &[Tensor], wrt: usize, f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let l = f(&mut g, &vars);
        let an = g.backward(l).get(vars[wrt]).unwrap().clone();
        let num = finite_difference(&inputs[wrt], 1e-6, |t| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, x)| g.constant(if i == wrt { t.clone() } else { x.clone() }))
                .collect();
            let l = f(&mut g, &vars);
            g.scalar(l)
        });
        relative_error(&an, &num, 1e-8)
    }

    #[test]
    fn rec_and_cyc_arithmetic() {
        let q = Tensor::new([2, 1, 9], (0..18).map(|i| i as f64 * 0.1).collect());
        let q1 = q.map(|v| v + 1.0);
        assert_eq!(rec_loss(&q, &q).unwrap(), 0.0);
        assert!((rec_loss(&q1, &q).unwrap() - 18.0).abs() < 1e-12);
        assert!((cyc_loss(&q1, &q).unwrap() - 18.0).abs() < 1e-12);
        assert!(matches!(rec_loss(&q, &Tensor::zeros([1, 1, 9])), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn rec_gradient_is_twice_difference() {
        let a = Tensor::new([2, 3], vec![0.1, 0.5, -0.3, 1.0, 2.0, -1.0]);
        let b = Tensor::new([2, 3], vec![0.0, 0.2, 0.3, -1.0, 0.5, 0.0]);
        let mut g = Graph::new();
        let va = g.param(a.clone());
        let vb = g.constant(b.clone());
        let l = rec_loss_op(&mut g, va, vb).unwrap();
        let grad = g.backward(l).get(va).unwrap().clone();
        for ((gv, x), y) in grad.data().iter().zip(a.data()).zip(b.data()) {
            assert!((gv - 2.0 * (x - y)).abs() < 1e-12);
        }
        assert!(grad_check(&[a, b], 0, |g, v| rec_loss_op(g, v[0], v[1]).unwrap()) < 1e-4);
    }

    #[test]
    fn adversarial_terms() {
        assert!((adv_loss_generator(&[0.5; 4], AdvConvention::Paper) - 4.0 * 0.5f64.ln()).abs() < 1e-12);
        let near_zero = adv_loss_generator(&[1e-9], AdvConvention::Paper);
        assert!(near_zero <= 0.0 && near_zero > -1e-6);
        let saturated = adv_loss_generator(&[1.0], AdvConvention::Paper);
        assert!(saturated.is_finite() && saturated < -15.0);
        assert!((adv_loss_generator(&[0.5; 2], AdvConvention::Nonsaturating) - 2.0 * 2f64.ln()).abs() < 1e-12);

        assert!((adv_loss_discriminator(&[0.5], &[0.5]) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(adv_loss_discriminator(&[1.0 - 1e-12], &[1e-12]) < 1e-6);
        // swapping labels and complementing probabilities preserves the value
        let (r, f) = ([0.8, 0.3, 0.6], [0.1, 0.4]);
        let swapped_real: Vec<f64> = f.iter().map(|p| 1.0 - p).collect();
        let swapped_fake: Vec<f64> = r.iter().map(|p| 1.0 - p).collect();
        assert!((adv_loss_discriminator(&r, &f) - adv_loss_discriminator(&swapped_real, &swapped_fake)).abs() < 1e-12);

        let p = Tensor::new([3], vec![0.2, 0.6, 0.9]);
        for conv in [AdvConvention::Paper, AdvConvention::Nonsaturating] {
            assert!(grad_check(&[p.clone()], 0, |g, v| adv_loss_generator_op(g, v[0], conv)) < 1e-4);
        }
        let q = Tensor::new([2], vec![0.3, 0.7]);
        assert!(grad_check(&[p.clone(), q.clone()], 0, |g, v| adv_loss_discriminator_op(g, v[0], v[1])) < 1e-4);
        assert!(grad_check(&[p, q], 1, |g, v| adv_loss_discriminator_op(g, v[0], v[1])) < 1e-4);
    }

    #[test]
    fn jdm_loss_properties() {
        let p = Tensor::new([2, 4, 3], (0..24).map(|i| ((i * 7 % 11) as f64 * 0.3).sin()).collect());
        for s in [0.5, 2.0, 7.0] {
            assert!(jdm_loss(&p, &p.map(|v| v * s)).unwrap() < 1e-12);
        }
        assert_eq!(jdm_loss(&p, &p).unwrap(), 0.0);
        // three collinear joints at x = 0, 1, 3 against x = 0, 2, 3
        let a = Tensor::new([1, 3, 3], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 3.0, 0.0, 0.0]);
        let b = Tensor::new([1, 3, 3], vec![0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 3.0, 0.0, 0.0]);
        // η(A) rows: [0, 1/4, 3/4], [1/3, 0, 2/3], [3/5, 2/5, 0]
        // η(B) rows: [0, 2/5, 3/5], [2/3, 0, 1/3], [3/4, 1/4, 0]
        let expect = 2.0 * (0.15f64.powi(2)) + 2.0 * (1.0f64 / 3.0).powi(2) + 2.0 * 0.15f64.powi(2);
        assert!((jdm_loss(&a, &b).unwrap() - expect).abs() < 1e-7);
        let q = p.map(|v| v * 1.3 + 0.1);
        let q = Tensor::new(q.shape().to_vec(), q.data().iter().enumerate().map(|(i, v)| v + 0.05 * (i as f64).cos()).collect());
        assert!(grad_check(&[p, q], 1, |g, v| jdm_loss_op(g, v[0], v[1]).unwrap()) < 1e-4);
    }

    #[test]
    fn sem_loss_arithmetic_and_gradient() {
        let a = Tensor::new([1, 2], vec![0.0, 0.0]);
        let b = Tensor::new([1, 2], vec![3.0, 4.0]);
        assert_eq!(sem_loss(&a, &b).unwrap(), 25.0);
        assert_eq!(sem_loss(&b, &b).unwrap(), 0.0);
        let mut g = Graph::new();
        let va = g.constant(a.clone());
        let vb = g.param(b.clone());
        let l = sem_loss_op(&mut g, va, vb).unwrap();
        assert_eq!(g.backward(l).get(vb).unwrap().data(), &[6.0, 8.0]);
        assert!(grad_check(&[a, b], 1, |g, v| sem_loss_op(g, v[0], v[1]).unwrap()) < 1e-4);
    }

    #[test]
    fn pen_loss_on_sphere() {
        let (v, f) = crate::mesh::icosphere(3, 1.0);
        let grid = Arc::new(sdf::build_sdf(&v, &f, 0.05, crate::parallel::Exec::default()).unwrap());
        let outside = Tensor::new([2, 3], vec![1.5, 0.0, 0.0, 0.0, -1.2, 0.3]);
        assert_eq!(pen_loss(&grid, &outside).unwrap(), 0.0);
        // depth 0.3 along an axis where the mesh surface is a vertex at radius 1
        let inside = Tensor::new([1, 3], vec![0.0, 0.7, 0.0]);
        let depth = pen_loss(&grid, &inside).unwrap();
        assert!((depth - 0.3).abs() < 0.05, "{depth}");

        let pts = Tensor::new([1, 3], vec![0.33, 0.41, 0.12]);
        let mut g = Graph::new();
        let p = g.param(pts.clone());
        let l = pen_loss_op(&mut g, &grid, p).unwrap();
        let grad = g.backward(l).get(p).unwrap().clone();
        let (_, n) = grid.query_point([0.33, 0.41, 0.12]);
        // descending the loss moves the vertex along +∇Φ, out of the body
        let step: Vec<f64> = grad.data().iter().map(|x| -x).collect();
        assert!(crate::math::dot(step.clone().try_into().unwrap(), n) > 0.0);
        assert!(grad_check(&[pts], 0, |g, v| pen_loss_op(g, &grid, v[0]).unwrap()) < 1e-3);
    }

    #[test]
    fn totals_are_affine() {
        let w = LossWeights::default();
        assert_eq!(total_pretrain_loss(&PretrainParts::default(), &w), 0.0);
        let ones = PretrainParts {
            rec: 1.0,
            cyc: 1.0,
            adv: 1.0,
            jdm: 1.0,
        };
        assert!((total_pretrain_loss(&ones, &w) - 12.1).abs() < 1e-12);
        assert_eq!(total_finetune_loss(&FinetuneParts::default(), &w), 0.0);
        assert!((total_finetune_loss(&FinetuneParts { sem: 2.0, pen: 3.0 }, &w) - 3.2).abs() < 1e-12);
        let mut twice = ones;
        twice.cyc = 3.0;
        assert!((total_pretrain_loss(&twice, &w) - total_pretrain_loss(&ones, &w) - 2.0 * w.cyc).abs() < 1e-12);
    }

    #[test]
    fn pen_ramp_schedule() {
        let r = PenRamp::default();
        assert_eq!(r.factor(1), 1.0);
        assert!(r.factor(3) > 1.0 && r.factor(3) < 10.0);
        assert_eq!(r.factor(5), 10.0);
        assert_eq!(r.factor(6), 1.0);
        assert_eq!(r.factor(25), 1.0);
    }
}
