//! End-to-end gradients of attention losses with respect to the latent, and
//! a central-difference checker to verify them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::AttentionStack;
use crate::backend::{Backend, BackendError, Latent};
use crate::constraints::ConstraintSet;
use crate::losses::{self, ActiveModes, Adjoint, Focus, LossConfig, LossError, SceneMaps};
use crate::par::{self, Execution};

#[derive(Debug, Error, PartialEq)]
pub enum GradError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
}

/// A single EAR term, for isolated checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Term {
    Mixing,
    Missing,
    Attr,
    Spatial,
}

/// Which scalar of the attention stack to differentiate.
#[derive(Debug, Clone)]
pub enum LossSpec<'a> {
    Ear {
        cs: &'a ConstraintSet,
        config: LossConfig,
    },
    Term {
        cs: &'a ConstraintSet,
        term: Term,
        config: LossConfig,
    },
    /// Weighted correction plus preservation for one faulty entity.
    Refinement {
        cs: &'a ConstraintSet,
        config: LossConfig,
        entity: usize,
        modes: ActiveModes,
        reference: &'a AttentionStack,
        proper: Vec<usize>,
    },
}

impl LossSpec<'_> {
    fn cs(&self) -> &ConstraintSet {
        match self {
            LossSpec::Ear { cs, .. } | LossSpec::Term { cs, .. } | LossSpec::Refinement { cs, .. } => cs,
        }
    }

    /// Loss value and, when `want_grad`, per-token map cotangents.
    pub fn evaluate(&self, stack: &AttentionStack, want_grad: bool) -> Result<(f64, Vec<Vec<f64>>), GradError> {
        let cs = self.cs();
        let maps = SceneMaps::resolve(stack, cs)?;
        let mut adj = want_grad.then(|| Adjoint::zeros(&maps));
        let value = match self {
            LossSpec::Ear { config, .. } => {
                losses::ear_terms(&maps, config, Focus::All, 1.0, adj.as_mut())?.total
            }
            LossSpec::Term { term, config, .. } => match term {
                Term::Mixing => losses::mixing_term(&maps, Focus::All, 1.0, adj.as_mut()),
                Term::Missing => losses::missing_term(&maps, config.reducer, Focus::All, 1.0, adj.as_mut()),
                Term::Attr => losses::attr_term(&maps, Focus::All, 1.0, adj.as_mut()),
                Term::Spatial => losses::spatial_term(&maps, config.center, Focus::All, 1.0, adj.as_mut())?,
            },
            LossSpec::Refinement {
                config,
                entity,
                modes,
                reference,
                proper,
                ..
            } => {
                let w = &config.weights;
                let correction =
                    losses::correction_terms(&maps, *entity, *modes, config, w.correction, adj.as_mut())?;
                let reference = SceneMaps::resolve(reference, cs)?;
                let preservation =
                    losses::preservation_terms(&maps, &reference, proper, w.preservation, adj.as_mut());
                losses::refinement_loss(correction, preservation, w)
            }
        };
        let mut cot = Vec::new();
        if let Some(adj) = adj {
            let (h, w) = stack.resolution();
            cot = vec![vec![0.0; h * w]; stack.len()];
            adj.scatter(cs, &mut cot);
        }
        Ok((value, cot))
    }
}

/// A scalar function of the latent with an analytic gradient.
pub trait Objective: Sync {
    fn value(&self, z: &Latent) -> Result<f64, GradError>;
    fn value_and_grad(&self, z: &Latent) -> Result<(f64, Vec<f64>), GradError>;
}

/// `loss(attention(z, t))` through a backend.
pub struct LatentObjective<'a, B: Backend + ?Sized> {
    pub backend: &'a B,
    pub t: usize,
    pub spec: LossSpec<'a>,
}

impl<B: Backend + ?Sized> Objective for LatentObjective<'_, B> {
    fn value(&self, z: &Latent) -> Result<f64, GradError> {
        let stack = self.backend.attention(z, self.t)?;
        Ok(self.spec.evaluate(&stack, false)?.0)
    }

    fn value_and_grad(&self, z: &Latent) -> Result<(f64, Vec<f64>), GradError> {
        loss_grad(self.backend, z, self.t, &self.spec)
    }
}

/// Loss on the attention produced from `z` at timestep `t`, and its
/// gradient with respect to `z`.
pub fn loss_grad<B: Backend + ?Sized>(
    backend: &B,
    z: &Latent,
    t: usize,
    spec: &LossSpec<'_>,
) -> Result<(f64, Vec<f64>), GradError> {
    let stack = backend.attention(z, t)?;
    let (value, cot) = spec.evaluate(&stack, true)?;
    let grad = backend.attention_vjp(z, t, &cot)?;
    if !value.is_finite() {
        return Err(GradError::NonFinite("loss"));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(GradError::NonFinite("gradient"));
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub coordinates: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn relative_error(a: f64, d: f64) -> f64 {
    (a - d).abs() / a.abs().max(d.abs()).max(1e-8)
}

/// Central differences `(f(z + h e_i) - f(z - h e_i)) / 2h` on every
/// coordinate, compared with the analytic gradient.
pub fn finite_diff_check(objective: &dyn Objective, z: &Latent, h: f64, tol: f64) -> Result<GradCheckReport, GradError> {
    assert!(h > 0.0, "step must be positive");
    let (_, grad) = objective.value_and_grad(z)?;
    let mut coordinates = Vec::with_capacity(z.len());
    let mut probe = z.clone();
    for (i, &analytic) in grad.iter().enumerate() {
        let orig = probe.0[i];
        probe.0[i] = orig + h;
        let up = objective.value(&probe)?;
        probe.0[i] = orig - h;
        let down = objective.value(&probe)?;
        probe.0[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        coordinates.push(CoordinateCheck {
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = coordinates.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        coordinates,
        max_rel_error,
        tolerance: tol,
        pass: max_rel_error <= tol,
    })
}

/// One loss checked at one latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCase {
    pub seed: u64,
    pub t: usize,
    pub loss: String,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Pass count of one loss across the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTally {
    pub loss: String,
    pub passed: usize,
    pub worst_rel_error: f64,
    pub pass: bool,
}

/// Every shipped loss checked over a list of seeded latents. Each loss must
/// pass on at least `required` of the seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seeds: usize,
    pub required: usize,
    pub h: f64,
    pub tolerance: f64,
    pub latents: LatentSource,
    pub losses: Vec<LossTally>,
    pub cases: Vec<SweepCase>,
    pub pass: bool,
}

/// How sweep latents are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentSource {
    /// Every coordinate i.i.d. standard normal.
    #[default]
    StandardNormal,
    /// The backend's own initial-noise sampler.
    InitialNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepOptions {
    pub h: f64,
    pub tol: f64,
    pub latents: LatentSource,
    pub execution: Execution,
    pub jobs: Option<usize>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            h: 1e-4,
            tol: 1e-4,
            latents: LatentSource::default(),
            execution: Execution::default(),
            jobs: None,
        }
    }
}

/// Seeds that must pass out of `n`: 49 in 50, rounded up.
pub fn required_passes(n: usize) -> usize {
    (n * 49).div_ceil(50)
}

fn kebab<T: Serialize>(v: T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

/// Names and specs of every shipped loss.
pub fn shipped_losses<'a>(
    cs: &'a ConstraintSet,
    config: &LossConfig,
    reference: &'a AttentionStack,
) -> Vec<(String, LossSpec<'a>)> {
    let mut out = Vec::new();
    for term in [Term::Mixing, Term::Attr, Term::Spatial] {
        out.push((
            kebab(term),
            LossSpec::Term {
                cs,
                term,
                config: *config,
            },
        ));
    }
    for reducer in [losses::MissingReducer::SumPositivePart, losses::MissingReducer::MaxPositivePart] {
        out.push((
            format!("missing/{}", kebab(reducer)),
            LossSpec::Term {
                cs,
                term: Term::Missing,
                config: LossConfig { reducer, ..*config },
            },
        ));
    }
    out.push(("ear".into(), LossSpec::Ear { cs, config: *config }));
    out.push((
        "refinement".into(),
        LossSpec::Refinement {
            cs,
            config: *config,
            entity: 0,
            modes: ActiveModes {
                entity: true,
                attribute: true,
                spatial: true,
            },
            reference,
            proper: (1..cs.entities.len()).collect(),
        },
    ));
    out
}

fn sweep_latent<B: Backend + ?Sized>(
    backend: &B,
    source: LatentSource,
    seed: u64,
    tokens: usize,
) -> Result<Latent, GradError> {
    Ok(match source {
        LatentSource::InitialNoise => backend.init_latent(seed, tokens)?,
        LatentSource::StandardNormal => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = backend.init_latent(seed, tokens)?.len();
            Latent((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        }
    })
}

fn sweep_seed<B: Backend + ?Sized>(
    backend: &B,
    cs: &ConstraintSet,
    config: &LossConfig,
    seed: u64,
    opts: &SweepOptions,
) -> Result<Vec<SweepCase>, GradError> {
    let steps = backend.steps().max(1);
    let t = (seed % steps as u64) as usize + 1;
    let z = sweep_latent(backend, opts.latents, seed, cs.prompt_len)?;
    let other = sweep_latent(backend, opts.latents, seed ^ 0x5eed, cs.prompt_len)?;
    let reference = backend.attention(&other, steps)?;
    shipped_losses(cs, config, &reference)
        .into_iter()
        .map(|(loss, spec)| {
            let objective = LatentObjective { backend, t, spec };
            let r = finite_diff_check(&objective, &z, opts.h, opts.tol)?;
            Ok(SweepCase {
                seed,
                t,
                loss,
                max_rel_error: r.max_rel_error,
                pass: r.pass,
            })
        })
        .collect()
}

/// Runs [`finite_diff_check`] for every shipped loss (each term, both
/// missing reducers, the full EAR loss and the refinement loss) on one latent
/// per seed, at a seed-dependent timestep.
pub fn gradcheck_sweep<B: Backend + ?Sized>(
    backend: &B,
    cs: &ConstraintSet,
    config: &LossConfig,
    seeds: &[u64],
    opts: SweepOptions,
) -> Result<SweepReport, GradError> {
    let per_seed = par::map(opts.execution, opts.jobs, seeds, |&s| sweep_seed(backend, cs, config, s, &opts));
    let mut cases = Vec::new();
    for r in per_seed {
        cases.extend(r?);
    }
    let required = required_passes(seeds.len());
    let mut losses: Vec<LossTally> = Vec::new();
    for c in &cases {
        let i = match losses.iter().position(|l| l.loss == c.loss) {
            Some(i) => i,
            None => {
                losses.push(LossTally {
                    loss: c.loss.clone(),
                    passed: 0,
                    worst_rel_error: 0.0,
                    pass: false,
                });
                losses.len() - 1
            }
        };
        losses[i].passed += c.pass as usize;
        losses[i].worst_rel_error = losses[i].worst_rel_error.max(c.max_rel_error);
    }
    for l in &mut losses {
        l.pass = l.passed >= required;
    }
    Ok(SweepReport {
        seeds: seeds.len(),
        required,
        h: opts.h,
        tolerance: opts.tol,
        latents: opts.latents,
        pass: !seeds.is_empty() && losses.iter().all(|l| l.pass),
        losses,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BlobWorld, StepCotangent, StepResult};
    use crate::constraints::{Entity, Relation, RelationKind};

    struct Quadratic;

    impl Objective for Quadratic {
        fn value(&self, z: &Latent) -> Result<f64, GradError> {
            Ok(z.0.iter().map(|v| v * v).sum())
        }
        fn value_and_grad(&self, z: &Latent) -> Result<(f64, Vec<f64>), GradError> {
            Ok((self.value(z)?, z.0.iter().map(|v| 2.0 * v).collect()))
        }
    }

    #[test]
    fn quadratic_agrees() {
        let z = Latent(vec![0.3, -1.7, 2.5, 0.0]);
        let r = finite_diff_check(&Quadratic, &z, 1e-4, 1e-9).unwrap();
        assert!(r.pass, "{}", r.max_rel_error);
    }

    fn two_entities() -> ConstraintSet {
        ConstraintSet {
            prompt: "A left of B".into(),
            prompt_len: 2,
            entities: vec![Entity::new("A", vec![0]), Entity::new("B", vec![1])],
            attributes: vec![],
            relations: vec![Relation {
                subject: "A".into(),
                kind: RelationKind::Left,
                object: "B".into(),
            }],
        }
    }

    #[test]
    fn zero_weights_zero_gradient() {
        let w = BlobWorld::default();
        let cs = two_entities();
        let z = w.init_latent(5, 2).unwrap();
        let spec = LossSpec::Ear {
            cs: &cs,
            config: LossConfig {
                weights: losses::LossWeights::zero(),
                ..Default::default()
            },
        };
        let (v, g) = loss_grad(&w, &z, 10, &spec).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|x| *x == 0.0));
    }

    fn place(w: &BlobWorld, xa: f64, xb: f64) -> Latent {
        use crate::backend::{Blob, SceneTruth};
        let b = |x| Blob {
            x,
            y: 7.5,
            scale: 1.0,
            amplitude: 0.95,
        };
        w.encode(&SceneTruth {
            tokens: vec![b(xa), b(xb)],
        })
    }

    #[test]
    fn spatial_gradient_signs() {
        let w = BlobWorld::default();
        let cs = two_entities();
        let spec = LossSpec::Term {
            cs: &cs,
            term: Term::Spatial,
            config: LossConfig::default(),
        };
        // A to the right of B: violated.
        let z = place(&w, 9.0, 7.0);
        let (_, g) = loss_grad(&w, &z, 10, &spec).unwrap();
        // Descent moves A's x slot negative and B's positive.
        assert!(-g[0] < 0.0);
        assert!(-g[4] > 0.0);
        let obj = LatentObjective {
            backend: &w,
            t: 10,
            spec: spec.clone(),
        };
        let r = finite_diff_check(&obj, &z, 1e-4, 1e-4).unwrap();
        assert_eq!(r.coordinates[0].numeric.signum(), g[0].signum());
        assert_eq!(r.coordinates[4].numeric.signum(), g[4].signum());

        // Satisfied by a wide margin: saturated.
        let z = place(&w, 1.0, 14.0);
        let (_, g) = loss_grad(&w, &z, 10, &spec).unwrap();
        assert!(g[0].abs() < 1e-4 && g[4].abs() < 1e-4, "{g:?}");
    }

    /// Wraps a backend and corrupts its vector-Jacobian product.
    struct Corrupt(BlobWorld);

    impl Backend for Corrupt {
        fn steps(&self) -> usize {
            self.0.steps()
        }
        fn resolution(&self) -> usize {
            self.0.resolution()
        }
        fn init_latent(&self, seed: u64, n: usize) -> Result<Latent, BackendError> {
            self.0.init_latent(seed, n)
        }
        fn attention(&self, z: &Latent, t: usize) -> Result<AttentionStack, BackendError> {
            self.0.attention(z, t)
        }
        fn step(&self, z: &Latent, t: usize) -> Result<StepResult, BackendError> {
            self.0.step(z, t)
        }
        fn vjp(&self, z: &Latent, t: usize, c: &StepCotangent) -> Result<Vec<f64>, BackendError> {
            let mut g = self.0.vjp(z, t, c)?;
            g[0] *= 1.01;
            Ok(g)
        }
    }

    #[test]
    fn corrupted_vjp_fails() {
        let w = Corrupt(BlobWorld::default());
        let cs = two_entities();
        let z = w.init_latent(11, 2).unwrap();
        let obj = LatentObjective {
            backend: &w,
            t: 20,
            spec: LossSpec::Ear {
                cs: &cs,
                config: LossConfig::default(),
            },
        };
        assert!(!finite_diff_check(&obj, &z, 1e-4, 1e-4).unwrap().pass);
    }

    #[test]
    fn gradient_is_linear_in_terms() {
        let w = BlobWorld::default();
        let cs = two_entities();
        let z = w.init_latent(21, 2).unwrap();
        let cfg = LossConfig::default();
        let (total, g) = loss_grad(&w, &z, 30, &LossSpec::Ear { cs: &cs, config: cfg }).unwrap();
        let mut sum_v = 0.0;
        let mut sum_g = vec![0.0; z.len()];
        for term in [Term::Mixing, Term::Missing, Term::Attr, Term::Spatial] {
            let (v, g) = loss_grad(&w, &z, 30, &LossSpec::Term { cs: &cs, term, config: cfg }).unwrap();
            sum_v += v;
            sum_g.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        assert!((total - sum_v).abs() < 1e-12);
        for (a, b) in g.iter().zip(&sum_g) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
