use super::PipelineError;
use crate::autodiff::{AdamConfig, AdamState, NodeId, Tape, Tensor};
use crate::geometry::{rigid_plane_point, rigid_plane_points_on_tape, RigidParams, ViewPlane};
use crate::model::{
    cross_entropy, loss_total, soft_dice, tape_data_loss, tape_latent_penalty, Checkpoint, ModelState, LATENT_REG,
};
use crate::views::{SliceBundle, ViewName};
use crate::volume::{GridSpec, LabelVolume};
use log::debug;
use serde::{Deserialize, Serialize};

/// Test-time optimization schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub total_steps: usize,
    /// Steps at the start during which only the latent code moves.
    pub latent_only_steps: usize,
    pub learning_rate: f64,
    pub latent_reg: f64,
    /// Whether the non-anchored views' rigid parameters are optimized.
    pub optimize_pose: bool,
    /// View fixed at its true acquisition plane; it defines the frame.
    pub anchored_view: ViewName,
    pub active_views: Vec<ViewName>,
    /// Use every `pixel_stride`-th row and column of each view.
    pub pixel_stride: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            latent_only_steps: 100,
            learning_rate: 1e-2,
            latent_reg: LATENT_REG,
            optimize_pose: true,
            anchored_view: ViewName::A4C,
            active_views: ViewName::ALL.to_vec(),
            pixel_stride: 1,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.into()));
        if self.total_steps > 0 && self.latent_only_steps >= self.total_steps {
            return bad("latent_only_steps must be below total_steps");
        }
        if !(self.learning_rate > 0.0) || !(self.latent_reg >= 0.0) {
            return bad("learning rate must be positive, λ non-negative");
        }
        if self.pixel_stride == 0 {
            return bad("pixel_stride must be at least 1");
        }
        if self.active_views.is_empty() {
            return bad("at least one active view is required");
        }
        let mut sorted = self.active_views.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.active_views.len() {
            return bad("active views must be distinct");
        }
        if self.optimize_pose && !self.active_views.contains(&self.anchored_view) {
            return bad("the anchored view must be active when poses are optimized");
        }
        Ok(())
    }

    /// Active views in canonical order, so results do not depend on how
    /// the list was written.
    fn sorted_views(&self) -> Vec<ViewName> {
        let mut v = self.active_views.clone();
        v.sort();
        v
    }
}

#[derive(Debug, Clone)]
pub struct ReconResult {
    pub latent: Vec<f64>,
    /// Final rigid parameters per active view, in canonical view order.
    pub poses: Vec<(ViewName, RigidParams)>,
    /// Argmax query on the bundle's reference grid.
    pub volume: LabelVolume,
    /// Objective value before each step.
    pub losses: Vec<f64>,
}

impl ReconResult {
    pub fn pose(&self, view: ViewName) -> Option<RigidParams> {
        self.poses.iter().find(|(v, _)| *v == view).map(|(_, p)| *p)
    }
}

/// Labelled pixels of one view, with the plane their coordinates are
/// generated from.
#[derive(Debug, Clone)]
pub struct SliceTarget {
    pub view: ViewName,
    pub plane: ViewPlane,
    pub pixels: Vec<(usize, usize)>,
    pub labels: Vec<u8>,
}

impl SliceTarget {
    /// Every `stride`-th row and column, starting half a stride in.
    pub fn subsampled(view: ViewName, plane: ViewPlane, labels: &[u8], stride: usize) -> Self {
        let (h, w) = (plane.height(), plane.width());
        let off = (stride - 1) / 2;
        let mut pixels = Vec::new();
        let mut picked = Vec::new();
        for r in (off..h).step_by(stride) {
            for c in (off..w).step_by(stride) {
                pixels.push((r, c));
                picked.push(labels[r * w + c]);
            }
        }
        Self {
            view,
            plane,
            pixels,
            labels: picked,
        }
    }

    fn points(&self, rigid: &RigidParams) -> Vec<[f64; 3]> {
        self.pixels
            .iter()
            .map(|&(r, c)| {
                rigid_plane_point(&self.plane, rigid, r, c)
                    .expect("pixel within plane")
                    .to_array()
            })
            .collect()
    }
}

/// Value and gradients of the slice objective
/// `Σ_views (CE + Dice) + λ‖z‖²`.
#[derive(Debug, Clone)]
pub struct SliceGradients {
    pub loss: f64,
    pub latent: Vec<f64>,
    /// `[α, t]` per target; zero for targets whose pose is held fixed.
    pub poses: Vec<[f64; 6]>,
    /// Network parameter gradients in [`ModelState::named_params`] order,
    /// when requested.
    pub theta: Option<Vec<Tensor>>,
}

/// Slice objective through the network, the rigid plane mapping, and the
/// latent penalty, on a fresh tape.
pub fn slice_objective(
    model: &ModelState,
    z: &[f64],
    targets: &[SliceTarget],
    poses: &[RigidParams],
    pose_free: &[bool],
    lambda: f64,
    theta_grad: bool,
) -> Result<SliceGradients, PipelineError> {
    assert_eq!(targets.len(), poses.len());
    assert_eq!(targets.len(), pose_free.len());
    let mut tape = Tape::new();
    let nodes = model.record(&mut tape, theta_grad);
    let zn = tape.param(Tensor::vector(z.to_vec()));
    let terms = model.latent_terms(&mut tape, &nodes, zn)?;
    let mut pose_nodes: Vec<Option<(NodeId, NodeId)>> = Vec::with_capacity(targets.len());
    let mut total = tape_latent_penalty(&mut tape, zn, lambda)?;
    let mut view_losses = Vec::with_capacity(targets.len());
    for ((target, rigid), free) in targets.iter().zip(poses).zip(pose_free) {
        let coords = if *free {
            let aa = tape.param(Tensor::vector(rigid.axis_angle.to_array().to_vec()));
            let t = tape.param(Tensor::vector(rigid.translation.to_array().to_vec()));
            pose_nodes.push(Some((aa, t)));
            rigid_plane_points_on_tape(&mut tape, &target.plane, &target.pixels, aa, t)?
        } else {
            pose_nodes.push(None);
            let pts = target.points(rigid);
            tape.constant(Tensor::matrix(pts.len(), 3, pts.into_iter().flatten().collect()))
        };
        let logits = model.tape_logits(&mut tape, &nodes, terms, coords)?;
        view_losses.push(tape_data_loss(&mut tape, logits, &target.labels)?);
    }
    for l in view_losses {
        total = tape.add(total, l)?;
    }
    let loss = tape.value(total).item();
    let mut grads = tape.backward(total)?;
    let latent = grads.take(zn).expect("latent leaf").into_data();
    let poses = pose_nodes
        .iter()
        .map(|p| match p {
            None => [0.0; 6],
            Some((aa, t)) => {
                let a = grads.get(*aa).expect("pose leaf").data();
                let t = grads.get(*t).expect("pose leaf").data();
                [a[0], a[1], a[2], t[0], t[1], t[2]]
            }
        })
        .collect();
    let theta = theta_grad.then(|| {
        nodes
            .ids()
            .into_iter()
            .map(|id| grads.take(id).expect("parameter leaf"))
            .collect()
    });
    Ok(SliceGradients {
        loss,
        latent,
        poses,
        theta,
    })
}

/// The same objective evaluated without the tape.
pub fn slice_objective_value(
    model: &ModelState,
    z: &[f64],
    targets: &[SliceTarget],
    poses: &[RigidParams],
    lambda: f64,
) -> Result<f64, PipelineError> {
    let mut data = 0.0;
    for (target, rigid) in targets.iter().zip(poses) {
        let probs = model.probs(&target.points(rigid), z)?;
        data += cross_entropy(&probs, &target.labels)? + soft_dice(&probs, &target.labels)?;
    }
    Ok(loss_total(data, z, lambda))
}

/// Per-step view of the optimization state, for monitoring.
pub struct ReconStep<'a> {
    pub step: usize,
    pub loss: f64,
    pub latent: &'a [f64],
    pub poses: &'a [(ViewName, RigidParams)],
}

/// Fit a latent code (and optionally view poses) to a slice bundle with the
/// network frozen, then query the reference grid.
pub fn reconstruct(bundle: &SliceBundle, ckpt: &Checkpoint, config: &ReconConfig) -> Result<ReconResult, PipelineError> {
    reconstruct_observed(bundle, ckpt, config, |_| {})
}

/// [`reconstruct`], calling `observe` after every step.
pub fn reconstruct_observed(
    bundle: &SliceBundle,
    ckpt: &Checkpoint,
    config: &ReconConfig,
    mut observe: impl FnMut(&ReconStep<'_>),
) -> Result<ReconResult, PipelineError> {
    config.validate()?;
    let model = &ckpt.model;
    let views = config.sorted_views();
    let mut targets = Vec::with_capacity(views.len());
    for &name in &views {
        let acquired = bundle.view(name).ok_or(PipelineError::MissingView(name))?;
        // The anchored view sits at its true acquisition plane; the others
        // start from their stored (assumed) planes.
        let plane = if name == config.anchored_view {
            acquired.true_plane.clone()
        } else {
            acquired.mask.plane.clone()
        };
        targets.push(SliceTarget::subsampled(name, plane, &acquired.mask.labels, config.pixel_stride));
    }
    let learnable: Vec<bool> = views
        .iter()
        .map(|v| config.optimize_pose && *v != config.anchored_view)
        .collect();

    let adam = AdamConfig::with_lr(config.learning_rate);
    let mut z = vec![0.0; model.latent_dim()];
    let mut latent_opt = AdamState::new(adam, [("z", z.len())]);
    // Pose moments start accumulating only once poses are released.
    let mut pose_opts: Vec<AdamState> = views
        .iter()
        .map(|v| AdamState::new(adam, [(format!("{v}.axis_angle"), 3), (format!("{v}.translation"), 3)]))
        .collect();
    let mut poses: Vec<(ViewName, RigidParams)> = views.iter().map(|v| (*v, RigidParams::default())).collect();
    let mut losses = Vec::with_capacity(config.total_steps);

    for step in 0..config.total_steps {
        let joint = step >= config.latent_only_steps;
        let free: Vec<bool> = learnable.iter().map(|l| *l && joint).collect();
        let current: Vec<RigidParams> = poses.iter().map(|(_, p)| *p).collect();
        let g = slice_objective(model, &z, &targets, &current, &free, config.latent_reg, false)?;
        if !g.loss.is_finite() {
            return Err(PipelineError::ReconDiverged { step, loss: g.loss });
        }
        losses.push(g.loss);
        latent_opt.step(&mut [z.as_mut_slice()], &[&g.latent])?;
        for (i, (_, pose)) in poses.iter_mut().enumerate() {
            if !free[i] {
                continue;
            }
            let mut aa = pose.axis_angle.to_array();
            let mut t = pose.translation.to_array();
            pose_opts[i].step(&mut [&mut aa, &mut t], &[&g.poses[i][..3], &g.poses[i][3..]])?;
            *pose = RigidParams::from_array([aa[0], aa[1], aa[2], t[0], t[1], t[2]]);
        }
        if step % 100 == 0 {
            debug!("recon step {step}: loss {:.5}", g.loss);
        }
        observe(&ReconStep {
            step,
            loss: g.loss,
            latent: &z,
            poses: &poses,
        });
    }
    let volume = dense_query(model, &z, &bundle.reference_grid)?;
    Ok(ReconResult {
        latent: z,
        poses,
        volume,
        losses,
    })
}

/// Argmax class of every voxel center of `grid`.
pub fn dense_query(model: &ModelState, z: &[f64], grid: &GridSpec) -> Result<LabelVolume, PipelineError> {
    let points: Vec<[f64; 3]> = (0..grid.len()).map(|i| grid.center_of(i).to_array()).collect();
    let labels = model.classify(&points, z)?;
    Ok(LabelVolume::new(*grid, labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::model::{argmax, init_model, LatentCodebook};
    use crate::phantom::{generate_phantom, PhantomParams};
    use crate::views::acquire_bundle;

    fn checkpoint(seed: u64) -> Checkpoint {
        Checkpoint {
            model: init_model(seed),
            codebook: LatentCodebook::init(vec!["a".into()], 128, LATENT_REG, seed),
        }
    }

    fn bundle(sigma: f64) -> SliceBundle {
        let vol = generate_phantom(&PhantomParams::with_grid(48, 4.0), 3).unwrap();
        acquire_bundle(&vol, "case", sigma, 9, 32).unwrap()
    }

    fn quick(config: ReconConfig) -> ReconConfig {
        ReconConfig {
            total_steps: 12,
            latent_only_steps: 4,
            pixel_stride: 4,
            ..config
        }
    }

    #[test]
    fn defaults() {
        let c = ReconConfig::default();
        assert_eq!((c.total_steps, c.latent_only_steps), (1000, 100));
        assert_eq!((c.learning_rate, c.latent_reg), (1e-2, 1e-4));
        assert_eq!(c.anchored_view, ViewName::A4C);
        assert_eq!(c.active_views.len(), 4);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        let base = ReconConfig::default();
        for c in [
            ReconConfig {
                latent_only_steps: 1000,
                ..base.clone()
            },
            ReconConfig {
                active_views: vec![ViewName::A2C, ViewName::A3C],
                ..base.clone()
            },
            ReconConfig {
                active_views: vec![ViewName::A4C, ViewName::A4C],
                ..base.clone()
            },
            ReconConfig {
                pixel_stride: 0,
                ..base.clone()
            },
        ] {
            assert!(c.validate().is_err(), "{c:?}");
        }
        // without pose optimization the anchor need not be active
        ReconConfig {
            optimize_pose: false,
            active_views: vec![ViewName::A2C],
            ..base
        }
        .validate()
        .unwrap();
    }

    #[test]
    fn subsampling_picks_centered_pixels() {
        let plane = ViewPlane::new(Vec3::ZERO, Vec3::X, Vec3::Y, vec![0.0; 8], vec![0.0; 8]).unwrap();
        let labels: Vec<u8> = (0..64).map(|i| (i % 6) as u8).collect();
        let t = SliceTarget::subsampled(ViewName::A2C, plane.clone(), &labels, 4);
        assert_eq!(t.pixels, vec![(1, 1), (1, 5), (5, 1), (5, 5)]);
        assert_eq!(t.labels, vec![labels[9], labels[13], labels[41], labels[45]]);
        assert_eq!(SliceTarget::subsampled(ViewName::A2C, plane, &labels, 1).pixels.len(), 64);
    }

    #[test]
    fn tape_objective_matches_plain_evaluation() {
        let b = bundle(5.0);
        let ckpt = checkpoint(1);
        let targets: Vec<SliceTarget> = b
            .views
            .iter()
            .map(|v| SliceTarget::subsampled(v.mask.view, v.mask.plane.clone(), &v.mask.labels, 4))
            .collect();
        let poses: Vec<RigidParams> = (0..4)
            .map(|i| RigidParams::from_array([0.01 * i as f64, -0.02, 0.03, 1.0, -2.0, 0.5 * i as f64]))
            .collect();
        let z: Vec<f64> = (0..128).map(|i| (i as f64 * 0.37).sin() * 0.1).collect();
        let tape = slice_objective(&ckpt.model, &z, &targets, &poses, &[true, false, true, false], 1e-4, false).unwrap();
        let plain = slice_objective_value(&ckpt.model, &z, &targets, &poses, 1e-4).unwrap();
        assert!((tape.loss - plain).abs() < 1e-10, "{} vs {plain}", tape.loss);
        assert_eq!(tape.poses[1], [0.0; 6]);
        assert!(tape.poses[0].iter().any(|g| *g != 0.0));
    }

    #[test]
    fn anchored_view_and_phase_one_leave_poses_untouched() {
        let b = bundle(5.0);
        let ckpt = checkpoint(2);
        let config = quick(ReconConfig::default());
        let mut phase_one_poses = Vec::new();
        let r = reconstruct_observed(&b, &ckpt, &config, |s| {
            if s.step < config.latent_only_steps {
                phase_one_poses.extend(s.poses.iter().map(|(_, p)| p.to_array()));
            }
        })
        .unwrap();
        assert!(phase_one_poses.iter().flatten().all(|v| v.to_bits() == 0));
        assert_eq!(r.pose(ViewName::A4C), Some(RigidParams::default()));
        assert!(r.pose(ViewName::A2C).unwrap().to_array().iter().any(|v| *v != 0.0));
        assert_eq!(r.losses.len(), 12);
        assert_eq!(r.volume.grid(), &b.reference_grid);
    }

    #[test]
    fn latent_only_never_moves_poses() {
        let b = bundle(5.0);
        let config = quick(ReconConfig {
            optimize_pose: false,
            ..ReconConfig::default()
        });
        let r = reconstruct(&b, &checkpoint(3), &config).unwrap();
        assert!(r.poses.iter().all(|(_, p)| p.to_array().iter().all(|v| v.to_bits() == 0)));
        assert!(r.latent.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn view_order_does_not_matter() {
        let b = bundle(5.0);
        let ckpt = checkpoint(4);
        let a = quick(ReconConfig::default());
        let c = ReconConfig {
            active_views: vec![ViewName::A5C, ViewName::A4C, ViewName::A2C, ViewName::A3C],
            ..a.clone()
        };
        let ra = reconstruct(&b, &ckpt, &a).unwrap();
        let rc = reconstruct(&b, &ckpt, &c).unwrap();
        assert!((ra.losses.last().unwrap() - rc.losses.last().unwrap()).abs() < 1e-9);
        assert_eq!(ra.latent, rc.latent);
    }

    #[test]
    fn missing_view_is_an_error() {
        let mut b = bundle(0.0);
        b.views.retain(|v| v.mask.view != ViewName::A4C);
        let err = reconstruct(&b, &checkpoint(5), &quick(ReconConfig::default())).unwrap_err();
        assert!(matches!(err, PipelineError::MissingView(ViewName::A4C)));
    }

    #[test]
    fn dense_query_matches_pointwise_argmax() {
        let model = init_model(6);
        let z: Vec<f64> = (0..128).map(|i| (i as f64).cos() * 0.5).collect();
        let grid = GridSpec::new([5, 4, 3], [7.0, 9.0, 11.0], Vec3::new(-20.0, -15.0, -10.0)).unwrap();
        let vol = dense_query(&model, &z, &grid).unwrap();
        for idx in 0..grid.len() {
            let logits = model.logits(&[grid.center_of(idx).to_array()], &z).unwrap();
            assert_eq!(vol.labels()[idx], argmax(&logits));
        }
        let single = GridSpec::new([1, 1, 1], [2.0; 3], Vec3::ZERO).unwrap();
        let one = dense_query(&model, &z, &single).unwrap();
        assert_eq!(one.labels(), model.classify(&[[1.0, 1.0, 1.0]], &z).unwrap().as_slice());
    }
}
