//! Teacher–student distillation: projection head, EMA teacher, centering and
//! the multi-object, local and total losses.
//!
//! All losses are cross-entropies `H(teacher, student) = −Σ t log s`, so
//! minimizing them pulls the student distribution toward the teacher's.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::encoder::{EncoderConfig, EncoderParams, EncoderWeights};
use crate::error::{DoraError, Result};
use crate::params::{param_struct, trunc_normal};
use crate::tensor::{softmax_in_place, Mat, Scalar};

/// Clamp inside the logarithm of [`cross_entropy`].
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub out_dim: usize,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub center_momentum: f64,
}

impl HeadConfig {
    /// Three-layer MLP with hidden width `4d` and bottleneck `d`.
    pub fn for_encoder(dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim: dim,
            hidden: 4 * dim,
            bottleneck: dim,
            out_dim,
            student_temp: 0.1,
            teacher_temp: 0.04,
            center_momentum: 0.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dim < 2 {
            return Err(DoraError::Config("head output dimension must be at least 2".into()));
        }
        if !(self.student_temp > 0.0 && self.teacher_temp > 0.0) {
            return Err(DoraError::Config("temperatures must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(DoraError::Config("center momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

param_struct! {
    /// MLP → L2-normalized bottleneck → weight-normalized prototypes layer.
    /// `last_w` holds one `bottleneck`-long prototype per output row.
    HeadWeights { fc1_w, fc1_b, fc2_w, fc2_b, fc3_w, fc3_b, last_w }
}

impl<T: Scalar> HeadWeights<Mat<T>> {
    pub fn init<R: Rng>(cfg: &HeadConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let std = 0.02;
        Ok(Self {
            fc1_w: trunc_normal(cfg.in_dim, cfg.hidden, std, rng),
            fc1_b: Mat::zeros(1, cfg.hidden),
            fc2_w: trunc_normal(cfg.hidden, cfg.hidden, std, rng),
            fc2_b: Mat::zeros(1, cfg.hidden),
            fc3_w: trunc_normal(cfg.hidden, cfg.bottleneck, std, rng),
            fc3_b: Mat::zeros(1, cfg.bottleneck),
            last_w: trunc_normal(cfg.out_dim, cfg.bottleneck, std, rng),
        })
    }
}

/// Records the head on a tape; `x` holds one embedding per row.
pub fn head_forward_tape<T: Scalar>(w: &HeadWeights<Var>, tape: &mut Tape<T>, x: Var) -> Var {
    let h = tape.matmul(x, w.fc1_w);
    let h = tape.add_bias(h, w.fc1_b);
    let h = tape.gelu(h);
    let h = tape.matmul(h, w.fc2_w);
    let h = tape.add_bias(h, w.fc2_b);
    let h = tape.gelu(h);
    let h = tape.matmul(h, w.fc3_w);
    let h = tape.add_bias(h, w.fc3_b);
    let h = tape.l2_normalize_rows(h);
    // unit-norm prototypes, so logits are cosines in [-1, 1]
    let protos = tape.l2_normalize_rows(w.last_w);
    tape.matmul_bt(h, protos)
}

/// Encoder plus head; one instance each for the student and the teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<P> {
    pub encoder: EncoderWeights<P>,
    pub head: HeadWeights<P>,
}

pub type ModelParams<T> = ModelWeights<Mat<T>>;

impl<P> ModelWeights<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> ModelWeights<Q> {
        ModelWeights { encoder: self.encoder.map("encoder.", f), head: self.head.map("head.", f) }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a P)) {
        self.encoder.visit("encoder.", f);
        self.head.visit("head.", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut P)) {
        self.encoder.visit_mut("encoder.", f);
        self.head.visit_mut("head.", f);
    }

    pub fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.visit(&mut |_, p| out.push(p));
        out
    }
}

impl<T: Scalar> ModelWeights<Mat<T>> {
    pub fn init<R: Rng>(enc: &EncoderConfig, head: &HeadConfig, rng: &mut R) -> Result<Self> {
        if head.in_dim != enc.dim {
            return Err(DoraError::Config(format!(
                "head input {} does not match encoder dim {}",
                head.in_dim, enc.dim
            )));
        }
        Ok(Self { encoder: EncoderParams::init(enc, rng)?, head: HeadWeights::init(head, rng)? })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ModelWeights<Var> {
        self.map(&mut |_, m| tape.leaf(m.clone()))
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |_, m| Mat::zeros(m.rows(), m.cols()))
    }

    pub fn parameter_count(&self) -> usize {
        self.leaves().iter().map(|m| m.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<Mat<U>> {
        self.map(&mut |_, m| m.cast())
    }

    pub fn same_shapes(&self, other: &Self) -> bool {
        let a = self.leaves();
        let b = other.leaves();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
    }
}

/// A distribution over the `D` head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-5 {
            return Err(DoraError::InvalidInput(format!("not a probability vector (sum {sum})")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(d: usize) -> Self {
        Self(vec![1.0 / d as f64; d])
    }

    /// Softmax of `logits / temperature`.
    pub fn from_logits(logits: &[f64], temperature: f64) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(DoraError::NumericOverflow { layer: usize::MAX, detail: "head logits".into() });
        }
        let mut p: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
        softmax_in_place(&mut p);
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Student,
    Teacher,
}

/// Raw head outputs for one embedding.
pub fn head_logits<T: Scalar>(params: &HeadWeights<Mat<T>>, embedding: &[T]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let w = params.map("", &mut |_, m| tape.leaf(m.clone()));
    let x = tape.leaf(Mat::from_vec(1, embedding.len(), embedding.to_vec())?);
    let out = head_forward_tape(&w, &mut tape, x);
    Ok(tape.value(out).as_slice().iter().map(|v| v.to_f64().unwrap()).collect())
}

/// Student: `softmax(logits/τ_s)`. Teacher: `softmax((logits − center)/τ_t)`.
pub fn head_forward<T: Scalar>(
    cfg: &HeadConfig,
    params: &HeadWeights<Mat<T>>,
    embedding: &[T],
    role: Role,
    center: &[f64],
) -> Result<ProbVector> {
    let logits = head_logits(params, embedding)?;
    probabilities(cfg, &logits, role, center)
}

pub fn probabilities(cfg: &HeadConfig, logits: &[f64], role: Role, center: &[f64]) -> Result<ProbVector> {
    match role {
        Role::Student => ProbVector::from_logits(logits, cfg.student_temp),
        Role::Teacher => {
            if center.len() != logits.len() {
                return Err(DoraError::Shape(format!("center of {} for {} logits", center.len(), logits.len())));
            }
            let centered: Vec<f64> = logits.iter().zip(center).map(|(l, c)| l - c).collect();
            ProbVector::from_logits(&centered, cfg.teacher_temp)
        }
    }
}

/// `θ′ ← αθ′ + (1 − α)θ`, evaluated at f64 and rounded once per entry.
pub fn ema_update<T: Scalar>(teacher: &mut ModelParams<T>, student: &ModelParams<T>, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DoraError::Config(format!("EMA momentum {alpha} outside [0, 1]")));
    }
    if !teacher.same_shapes(student) {
        return Err(DoraError::Shape("teacher and student shapes differ".into()));
    }
    let src = student.leaves();
    let mut i = 0;
    teacher.visit_mut(&mut |_, t| {
        for (a, b) in t.as_mut_slice().iter_mut().zip(src[i].as_slice()) {
            let v = alpha * a.to_f64().unwrap() + (1.0 - alpha) * b.to_f64().unwrap();
            *a = T::lit(v);
        }
        i += 1;
    });
    Ok(())
}

/// `center ← m·center + (1 − m)·batch_mean`.
pub fn center_update(center: &[f64], batch_mean: &[f64], momentum: f64) -> Vec<f64> {
    center.iter().zip(batch_mean).map(|(c, b)| momentum * c + (1.0 - momentum) * b).collect()
}

/// `−Σ_j t_j log(s_j + 1e-12)`.
pub fn cross_entropy(teacher: &ProbVector, student: &ProbVector) -> f64 {
    -teacher.0.iter().zip(&student.0).map(|(t, s)| t * (s + LOG_EPS).ln()).sum::<f64>()
}

/// A loss value together with the number of cross-entropy terms it summed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub value: f64,
    pub terms: usize,
}

/// Sum over ordered view pairs `u ≠ v` and objects `i` of
/// `H(teacher(X^u), student(X^{v,o_i}))`.
///
/// `teacher[v]` is the teacher output for global view `v`; `student[v][i]` the
/// student output for view `v` masked by object `i`.
pub fn multi_object_loss(teacher: &[ProbVector], student: &[Vec<ProbVector>]) -> Result<LossTerms> {
    if teacher.len() != student.len() || teacher.len() < 2 {
        return Err(DoraError::InvalidInput(format!(
            "{} teacher views vs {} student views",
            teacher.len(),
            student.len()
        )));
    }
    let k = student[0].len();
    if k == 0 || student.iter().any(|s| s.len() != k) {
        return Err(DoraError::InvalidInput("every view needs the same, nonzero number of objects".into()));
    }
    let mut value = 0.0;
    let mut terms = 0;
    for (u, t) in teacher.iter().enumerate() {
        for (v, masked) in student.iter().enumerate() {
            if u == v {
                continue;
            }
            for s in masked {
                value += cross_entropy(t, s);
                terms += 1;
            }
        }
    }
    Ok(LossTerms { value, terms })
}

/// Sum over global views `v` and local crops `i` of `H(teacher(X^v), student(X^{ℓ_i}))`.
pub fn local_loss(teacher: &[ProbVector], student_local: &[ProbVector]) -> Result<LossTerms> {
    if teacher.is_empty() {
        return Err(DoraError::InvalidInput("no teacher views".into()));
    }
    let mut value = 0.0;
    let mut terms = 0;
    for t in teacher {
        for s in student_local {
            value += cross_entropy(t, s);
            terms += 1;
        }
    }
    Ok(LossTerms { value, terms })
}

/// `(1/T) Σ_t (L_t^O + L_t^LC)`.
pub fn total_loss(object: &[f64], local: &[f64]) -> Result<f64> {
    if object.is_empty() || object.len() != local.len() {
        return Err(DoraError::InvalidInput(format!(
            "{} object losses vs {} local losses",
            object.len(),
            local.len()
        )));
    }
    Ok(object.iter().zip(local).map(|(o, l)| o + l).sum::<f64>() / object.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_prob(rng: &mut ChaCha8Rng, d: usize) -> ProbVector {
        let logits: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        ProbVector::from_logits(&logits, 1.0).unwrap()
    }

    fn tiny_head() -> (HeadConfig, HeadWeights<Mat<f64>>) {
        let cfg = HeadConfig::for_encoder(8, 6);
        let w = HeadWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (cfg, w)
    }

    #[test]
    fn zero_logits_uniform() {
        let cfg = HeadConfig::for_encoder(8, 4);
        let p = probabilities(&cfg, &[0.0; 4], Role::Teacher, &[0.0; 4]).unwrap();
        assert_eq!(p, ProbVector::uniform(4));
    }

    #[test]
    fn head_outputs_are_distributions() {
        let (cfg, w) = tiny_head();
        let x: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        for role in [Role::Student, Role::Teacher] {
            let p = head_forward(&cfg, &w, &x, role, &[0.1; 6]).unwrap();
            assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(head_forward(&cfg, &w, &x, Role::Teacher, &[0.0; 3]).is_err());
    }

    #[test]
    fn low_teacher_temperature_sharpens() {
        let logits = [0.3, -0.2, 0.1, 0.05];
        let sharp = ProbVector::from_logits(&logits, 0.04).unwrap();
        let soft = ProbVector::from_logits(&logits, 1.0).unwrap();
        let max = |p: &ProbVector| p.as_slice().iter().copied().fold(0.0, f64::max);
        assert!(max(&sharp) > max(&soft));
    }

    #[test]
    fn ema_endpoints_and_arithmetic() {
        let enc = EncoderConfig { image_size: 8, patch: 4, dim: 8, depth: 1, heads: 2, ..Default::default() };
        let head = HeadConfig::for_encoder(8, 6);
        let student = ModelParams::<f64>::init(&enc, &head, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let teacher0 = ModelParams::<f64>::init(&enc, &head, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();

        let mut t = teacher0.clone();
        ema_update(&mut t, &student, 1.0).unwrap();
        assert_eq!(t, teacher0);
        ema_update(&mut t, &student, 0.0).unwrap();
        assert_eq!(t, student);

        let mut ones = student.map(&mut |_, m| Mat::filled(m.rows(), m.cols(), 1.0));
        let zeros = student.zeros_like();
        ema_update(&mut ones, &zeros, 0.9).unwrap();
        assert!(ones.leaves().iter().all(|m| m.as_slice().iter().all(|&v| v == 0.9)));

        let other = EncoderConfig { depth: 2, ..enc };
        let mut bad = ModelParams::<f64>::init(&other, &head, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(ema_update(&mut bad, &student, 0.5).is_err());
    }

    #[test]
    fn center_update_closed_form() {
        assert_eq!(center_update(&[1.0, 2.0], &[5.0, 7.0], 1.0), vec![1.0, 2.0]);
        assert_eq!(center_update(&[1.0, 2.0], &[5.0, 7.0], 0.0), vec![5.0, 7.0]);
        let c0 = [1.0, -2.0];
        let (b1, b2) = ([3.0, 0.5], [-1.0, 4.0]);
        let c2 = center_update(&center_update(&c0, &b1, 0.9), &b2, 0.9);
        for i in 0..2 {
            let closed = 0.81 * c0[i] + 0.9 * 0.1 * b1[i] + 0.1 * b2[i];
            assert!((c2[i] - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let u = ProbVector::uniform(4);
        assert!((cross_entropy(&u, &u) - 4f64.ln()).abs() < 1e-9);
        let one_hot = ProbVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        let s = ProbVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!((cross_entropy(&one_hot, &s) + (0.3f64 + LOG_EPS).ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (t, s) = (random_prob(&mut rng, 7), random_prob(&mut rng, 7));
            let mut oracle = 0.0;
            for j in 0..7 {
                oracle -= t.as_slice()[j] * (s.as_slice()[j] + 1e-12).ln();
            }
            assert!((cross_entropy(&t, &s) - oracle).abs() < 1e-12);
            assert!(cross_entropy(&t, &s) >= t.entropy() - 1e-9);
            assert!((cross_entropy(&t, &t) - t.entropy()).abs() < 1e-6);
        }
    }

    #[test]
    fn object_loss_counts_and_factorizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = random_prob(&mut rng, 5);
        let s = random_prob(&mut rng, 5);
        let l = multi_object_loss(&[t.clone(), t.clone()], &[vec![s.clone(); 3], vec![s.clone(); 3]]).unwrap();
        assert_eq!(l.terms, 6);
        assert!((l.value - 6.0 * cross_entropy(&t, &s)).abs() < 1e-12);

        let u = ProbVector::uniform(4);
        let l = multi_object_loss(&[u.clone(), u.clone()], &[vec![u.clone()], vec![u.clone()]]).unwrap();
        assert!((l.value - 2.0 * 4f64.ln()).abs() < 1e-9);
        assert!(multi_object_loss(&[u.clone(), u.clone()], &[vec![u.clone()], vec![]]).is_err());
    }

    #[test]
    fn object_loss_pairs_each_view_with_the_other() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ta = random_prob(&mut rng, 4);
        let tb = random_prob(&mut rng, 4);
        let sa: Vec<_> = (0..2).map(|_| random_prob(&mut rng, 4)).collect();
        let sb: Vec<_> = (0..2).map(|_| random_prob(&mut rng, 4)).collect();
        let got = multi_object_loss(&[ta.clone(), tb.clone()], &[sa.clone(), sb.clone()]).unwrap();
        let want: f64 = sb.iter().map(|s| cross_entropy(&ta, s)).sum::<f64>()
            + sa.iter().map(|s| cross_entropy(&tb, s)).sum::<f64>();
        assert!((got.value - want).abs() < 1e-12);
    }

    #[test]
    fn local_loss_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = [random_prob(&mut rng, 4), random_prob(&mut rng, 4)];
        let s: Vec<_> = (0..6).map(|_| random_prob(&mut rng, 4)).collect();
        let l = local_loss(&t, &s).unwrap();
        assert_eq!(l.terms, 12);
        let direct: f64 = t.iter().flat_map(|t| s.iter().map(move |s| cross_entropy(t, s))).sum();
        assert!((l.value - direct).abs() < 1e-12);
        let u = ProbVector::uniform(4);
        assert!((local_loss(&[u.clone(), u.clone()], &[u.clone()]).unwrap().value - 2.0 * 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn total_loss_averages_frames() {
        assert_eq!(total_loss(&[1.5], &[2.0]).unwrap(), 3.5);
        assert!((total_loss(&[2.0; 5], &[3.0; 5]).unwrap() - 5.0).abs() < 1e-12);
        let o = [0.3, 1.7, 2.2];
        let l = [0.9, 0.1, 4.0];
        let mut naive = 0.0;
        for i in 0..3 {
            naive += o[i] + l[i];
        }
        assert!((total_loss(&o, &l).unwrap() - naive / 3.0).abs() < 1e-12);
        assert!(total_loss(&[], &[]).is_err());
    }
}
