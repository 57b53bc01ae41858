//! The trainable stack: per-tap feature construction, experts, gate and
//! ranker parameters in one flat vector, with batched forward and
//! hand-derived backward passes over many items at once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::LayerStates;
use crate::compressor::{
    attention_pool, attention_pool_backward, merged_old_tokens, widen, CompressorParams,
    MergeConfig,
};
use crate::error::{Error, Result};
use crate::fusion::{add_into, ExpertParams, FusionMode, GateParams};
use crate::linalg::{axpy, dot, snap_to_f32, softmax_in_place};
use crate::params::{AffineIdx, Group, Registry};
use crate::ranker::RankerParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: FusionMode,
    /// Backbone width.
    pub d: usize,
    pub n_taps: usize,
    /// Queries per attention-pooling branch.
    pub m: usize,
    pub d_c: usize,
    pub d_z: usize,
    pub gate_hidden: usize,
    pub merge: MergeConfig,
    pub h_max: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Full,
            d: 64,
            n_taps: 6,
            m: 4,
            d_c: 64,
            d_z: 64,
            gate_hidden: 32,
            merge: MergeConfig::default(),
            h_max: crate::ranker::DEFAULT_H_MAX,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.d, "d"),
            (self.n_taps, "n_taps"),
            (self.m, "m"),
            (self.d_c, "d_c"),
            (self.d_z, "d_z"),
            (self.gate_hidden, "gate_hidden"),
            (self.h_max, "h_max"),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_c % 2 != 0 {
            return Err(Error::Config(format!("d_c = {} must be even", self.d_c)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompressorIdx {
    pub old_q: usize,
    pub new_q: usize,
    pub old_proj: AffineIdx,
    pub new_proj: AffineIdx,
    pub empty: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertIdx {
    pub fc1: AffineIdx,
    pub fc2: AffineIdx,
    pub shortcut: Option<AffineIdx>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateIdx {
    pub fc1: AffineIdx,
    pub fc2: AffineIdx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankerIdx {
    pub pos: usize,
    pub head: AffineIdx,
    pub cold: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureLayout {
    Full(Vec<CompressorIdx>),
    /// One `d → d_c` projection per tap.
    TapProjection(Vec<AffineIdx>),
    /// A single `d → d_z` projection of the deepest tap.
    LastLayer(AffineIdx),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub registry: Registry,
    pub features: FeatureLayout,
    pub experts: Vec<ExpertIdx>,
    pub gate: Option<GateIdx>,
    pub ranker: RankerIdx,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut r = Registry::default();
        let g = Group::Fusion;
        let features = match c.mode {
            FusionMode::Full => FeatureLayout::Full(
                (0..c.n_taps)
                    .map(|i| CompressorIdx {
                        old_q: r.add(format!("compressor.{i}.old_queries"), &[c.m, c.d], g),
                        new_q: r.add(format!("compressor.{i}.new_queries"), &[c.m, c.d], g),
                        old_proj: r.affine(&format!("compressor.{i}.old_proj"), c.m * c.d, c.d_c / 2, g),
                        new_proj: r.affine(&format!("compressor.{i}.new_proj"), c.m * c.d, c.d_c / 2, g),
                        empty: r.add(format!("compressor.{i}.empty_token"), &[c.d], g),
                    })
                    .collect(),
            ),
            FusionMode::LastTokenMoe | FusionMode::MeanPoolMoe => FeatureLayout::TapProjection(
                (0..c.n_taps)
                    .map(|i| r.affine(&format!("proj.{i}"), c.d, c.d_c, g))
                    .collect(),
            ),
            FusionMode::LastLayerLastToken => FeatureLayout::LastLayer(r.affine("proj.last", c.d, c.d_z, g)),
        };
        let (experts, gate) = if c.mode.has_gate() {
            let experts = (0..c.n_taps)
                .map(|i| ExpertIdx {
                    fc1: r.affine(&format!("expert.{i}.fc1"), c.d_c, c.d_z, g),
                    fc2: r.affine(&format!("expert.{i}.fc2"), c.d_z, c.d_z, g),
                    shortcut: (c.d_c != c.d_z)
                        .then(|| r.affine(&format!("expert.{i}.shortcut"), c.d_c, c.d_z, g)),
                })
                .collect();
            let gate = GateIdx {
                fc1: r.affine("gate.fc1", c.n_taps * c.d_z, c.gate_hidden, g),
                fc2: r.affine("gate.fc2", c.gate_hidden, c.n_taps, g),
            };
            (experts, Some(gate))
        } else {
            (Vec::new(), None)
        };
        let ranker = RankerIdx {
            pos: r.add("ranker.pos_logits", &[c.h_max], Group::Head),
            head: r.affine("ranker.head", c.d_z, c.d_z, Group::Head),
            cold: r.add("ranker.cold_start", &[c.d_z], Group::Head),
        };
        Self {
            registry: r,
            features,
            experts,
            gate,
            ranker,
        }
    }
}

/// Parameter-independent per-item input, computed once from layer states.
#[derive(Clone, Debug, PartialEq)]
pub enum ItemInput {
    /// Per tap: merged old tokens and generated tokens (possibly none).
    Full(Vec<TapTokens>),
    /// Per tap: one `d`-wide summary vector.
    Taps(Vec<Vec<f64>>),
    /// Deepest tap's final token.
    Last(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TapTokens {
    pub old: Vec<f64>,
    pub new: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    pub params: Vec<f64>,
}

fn fill_uniform(rng: &mut ChaCha8Rng, dst: &mut [f64], bound: f64) {
    for v in dst {
        *v = rng.gen_range(-bound..bound);
    }
}

fn init_affine(rng: &mut ChaCha8Rng, p: &mut [f64], a: &AffineIdx) {
    let bound = 1.0 / (a.n_in as f64).sqrt();
    fill_uniform(rng, &mut p[a.w..a.w + a.n_in * a.n_out], bound);
}

impl Model {
    /// Seeded initialization; every value lies on the f32 grid.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut p = vec![0.0; layout.registry.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d;
        match &layout.features {
            FeatureLayout::Full(cs) => {
                for c in cs {
                    fill_uniform(&mut rng, &mut p[c.old_q..c.old_q + config.m * d], 0.5);
                    fill_uniform(&mut rng, &mut p[c.new_q..c.new_q + config.m * d], 0.5);
                    init_affine(&mut rng, &mut p, &c.old_proj);
                    init_affine(&mut rng, &mut p, &c.new_proj);
                    fill_uniform(&mut rng, &mut p[c.empty..c.empty + d], 0.5);
                }
            }
            FeatureLayout::TapProjection(ps) => {
                for a in ps {
                    init_affine(&mut rng, &mut p, a);
                }
            }
            FeatureLayout::LastLayer(a) => init_affine(&mut rng, &mut p, a),
        }
        for e in &layout.experts {
            init_affine(&mut rng, &mut p, &e.fc1);
            init_affine(&mut rng, &mut p, &e.fc2);
            if let Some(s) = &e.shortcut {
                init_affine(&mut rng, &mut p, s);
            }
        }
        if let Some(g) = &layout.gate {
            init_affine(&mut rng, &mut p, &g.fc1);
            init_affine(&mut rng, &mut p, &g.fc2);
        }
        let r = layout.ranker;
        let dz = config.d_z;
        for i in 0..dz {
            p[r.head.w + i * dz + i] = 1.0;
        }
        fill_uniform(&mut rng, &mut p[r.cold..r.cold + dz], 0.1);
        snap_to_f32(&mut p);
        Ok(Self {
            config,
            layout,
            params: p,
        })
    }

    /// Rebuilds a model around existing parameters.
    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.registry.len() {
            return Err(Error::Shape(format!(
                "{} parameters supplied, layout needs {}",
                params.len(),
                layout.registry.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn registry(&self) -> &Registry {
        &self.layout.registry
    }

    pub fn mode(&self) -> FusionMode {
        self.config.mode
    }

    /// Per-tap features are stored only for modes that have them.
    pub fn per_layer_width(&self) -> Option<usize> {
        self.config.mode.has_gate().then_some(self.config.d_c)
    }

    pub fn prepare(&self, states: &LayerStates) -> Result<ItemInput> {
        let c = &self.config;
        if states.d != c.d {
            return Err(Error::Version(format!(
                "layer states have width {}, model expects {}",
                states.d, c.d
            )));
        }
        if states.taps.len() != c.n_taps {
            return Err(Error::Version(format!(
                "layer states have {} taps, model expects {}",
                states.taps.len(),
                c.n_taps
            )));
        }
        states.validate()?;
        let last_row = states.n_tokens() - 1;
        Ok(match c.mode {
            FusionMode::Full => ItemInput::Full(
                (0..c.n_taps)
                    .map(|t| {
                        Ok(TapTokens {
                            old: merged_old_tokens(states.old_tokens(t), c.d, c.merge)?,
                            new: widen(states.new_tokens(t)),
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
            FusionMode::LastTokenMoe => ItemInput::Taps(
                (0..c.n_taps)
                    .map(|t| widen(states.token(t, last_row)))
                    .collect(),
            ),
            FusionMode::MeanPoolMoe => ItemInput::Taps(
                (0..c.n_taps)
                    .map(|t| token_mean(&states.taps[t].hidden, c.d))
                    .collect(),
            ),
            FusionMode::LastLayerLastToken => {
                ItemInput::Last(widen(states.token(c.n_taps - 1, last_row)))
            }
        })
    }

    pub fn compressor_params(&self, tap: usize) -> Option<CompressorParams> {
        let FeatureLayout::Full(cs) = &self.layout.features else {
            return None;
        };
        let c = cs[tap];
        let (m, d) = (self.config.m, self.config.d);
        let p = &self.params;
        Some(CompressorParams {
            d,
            m,
            d_c: self.config.d_c,
            old_queries: p[c.old_q..c.old_q + m * d].to_vec(),
            new_queries: p[c.new_q..c.new_q + m * d].to_vec(),
            old_proj_w: c.old_proj.weight(p).to_vec(),
            old_proj_b: c.old_proj.bias(p).to_vec(),
            new_proj_w: c.new_proj.weight(p).to_vec(),
            new_proj_b: c.new_proj.bias(p).to_vec(),
            empty_token: p[c.empty..c.empty + d].to_vec(),
        })
    }

    pub fn expert_params(&self, tap: usize) -> Option<ExpertParams> {
        let e = self.layout.experts.get(tap)?;
        let p = &self.params;
        Some(ExpertParams {
            d_c: self.config.d_c,
            d_z: self.config.d_z,
            w1: e.fc1.weight(p).to_vec(),
            b1: e.fc1.bias(p).to_vec(),
            w2: e.fc2.weight(p).to_vec(),
            b2: e.fc2.bias(p).to_vec(),
            shortcut: e
                .shortcut
                .map(|s| (s.weight(p).to_vec(), s.bias(p).to_vec())),
        })
    }

    pub fn gate_params(&self) -> Option<GateParams> {
        let g = self.layout.gate?;
        let p = &self.params;
        Some(GateParams {
            n_taps: self.config.n_taps,
            d_z: self.config.d_z,
            w1: g.fc1.weight(p).to_vec(),
            b1: g.fc1.bias(p).to_vec(),
            w2: g.fc2.weight(p).to_vec(),
            b2: g.fc2.bias(p).to_vec(),
        })
    }

    pub fn ranker_params(&self) -> RankerParams {
        ranker_view(&self.config, &self.layout.ranker, &self.params)
    }

    /// Embeds one item: `z_v` and, for gated modes, the layer weights.
    pub fn embed_item(&self, states: &LayerStates) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let input = self.prepare(states)?;
        let f = self.forward(&self.params, &[&input]);
        Ok((f.z, f.pi))
    }

    /// Batched forward pass over `items` with explicit parameters.
    pub fn forward(&self, p: &[f64], items: &[&ItemInput]) -> Forward {
        let c = &self.config;
        let b = items.len();
        let n = c.n_taps;
        let mut fw = Forward {
            rows: b,
            z: Vec::new(),
            pi: None,
            e: Vec::new(),
            h: Vec::new(),
            feat: Vec::new(),
            pools: Vec::new(),
            t1: Vec::new(),
            gate_c: Vec::new(),
            gate_g: Vec::new(),
        };
        match &self.layout.features {
            FeatureLayout::LastLayer(a) => {
                let f: Vec<f64> = items
                    .iter()
                    .flat_map(|it| match it {
                        ItemInput::Last(v) => v.iter().copied(),
                        _ => panic!("item input does not match the model mode"),
                    })
                    .collect();
                fw.z = a.forward(p, &f, b);
                fw.feat.push(f);
                return fw;
            }
            FeatureLayout::TapProjection(ps) => {
                for (t, a) in ps.iter().enumerate() {
                    let f: Vec<f64> = items
                        .iter()
                        .flat_map(|it| match it {
                            ItemInput::Taps(v) => v[t].iter().copied(),
                            _ => panic!("item input does not match the model mode"),
                        })
                        .collect();
                    fw.e.push(a.forward(p, &f, b));
                    fw.feat.push(f);
                }
            }
            FeatureLayout::Full(cs) => {
                for (t, ci) in cs.iter().enumerate() {
                    let pc = self.pool_tap(p, ci, t, items);
                    let x_old = ci.old_proj.forward(p, &pc.p_old, b);
                    let x_new = ci.new_proj.forward(p, &pc.p_new, b);
                    let half = c.d_c / 2;
                    let mut e = Vec::with_capacity(b * c.d_c);
                    for r in 0..b {
                        e.extend_from_slice(&x_old[r * half..(r + 1) * half]);
                        e.extend_from_slice(&x_new[r * half..(r + 1) * half]);
                    }
                    fw.e.push(e);
                    fw.pools.push(pc);
                }
            }
        }

        for (t, ex) in self.layout.experts.iter().enumerate() {
            let x = &fw.e[t];
            let mut t1 = ex.fc1.forward(p, x, b);
            t1.iter_mut().for_each(|v| *v = v.tanh());
            let mut h = ex.fc2.forward(p, &t1, b);
            match &ex.shortcut {
                None => add_into(&mut h, x),
                Some(s) => add_into(&mut h, &s.forward(p, x, b)),
            }
            fw.t1.push(t1);
            fw.h.push(h);
        }

        let g = self.layout.gate.expect("gated mode has a gate");
        let dz = c.d_z;
        let mut cat = Vec::with_capacity(b * n * dz);
        for r in 0..b {
            for h in &fw.h {
                cat.extend_from_slice(&h[r * dz..(r + 1) * dz]);
            }
        }
        let mut gh = g.fc1.forward(p, &cat, b);
        gh.iter_mut().for_each(|v| *v = v.tanh());
        let mut pi = g.fc2.forward(p, &gh, b);
        for row in pi.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let mut z = vec![0.0; b * dz];
        for r in 0..b {
            let zr = &mut z[r * dz..(r + 1) * dz];
            for (l, h) in fw.h.iter().enumerate() {
                axpy(pi[r * n + l], &h[r * dz..(r + 1) * dz], zr);
            }
        }
        fw.z = z;
        fw.pi = Some(pi);
        fw.gate_c = cat;
        fw.gate_g = gh;
        fw
    }

    fn pool_tap(&self, p: &[f64], ci: &CompressorIdx, t: usize, items: &[&ItemInput]) -> PoolCache {
        let (m, d) = (self.config.m, self.config.d);
        let q_old = &p[ci.old_q..ci.old_q + m * d];
        let q_new = &p[ci.new_q..ci.new_q + m * d];
        let empty = &p[ci.empty..ci.empty + d];
        let mut pc = PoolCache {
            p_old: Vec::with_capacity(items.len() * m * d),
            p_new: Vec::with_capacity(items.len() * m * d),
            w_old: Vec::with_capacity(items.len()),
            w_new: Vec::with_capacity(items.len()),
        };
        for it in items {
            let ItemInput::Full(taps) = it else {
                panic!("item input does not match the model mode");
            };
            let tt = &taps[t];
            let (po, wo) = attention_pool(&tt.old, q_old, d).expect("old branch is nonempty");
            let new = if tt.new.is_empty() { empty } else { &tt.new[..] };
            let (pn, wn) = attention_pool(new, q_new, d).expect("new branch is nonempty");
            pc.p_old.extend(po);
            pc.p_new.extend(pn);
            pc.w_old.push(wo);
            pc.w_new.push(wn);
        }
        pc
    }

    /// Accumulates `∂L/∂params` into `grad` given `∂L/∂z` for every row of a
    /// forward pass computed with the same `p` and `items`.
    pub fn backward(&self, p: &[f64], items: &[&ItemInput], fw: &Forward, dz: &[f64], grad: &mut [f64]) {
        let c = &self.config;
        let b = fw.rows;
        let n = c.n_taps;
        let dzw = c.d_z;
        if let FeatureLayout::LastLayer(a) = &self.layout.features {
            a.backward(p, grad, &fw.feat[0], dz, b, false);
            return;
        }
        let pi = fw.pi.as_ref().expect("gated forward");
        let mut dh: Vec<Vec<f64>> = vec![vec![0.0; b * dzw]; n];
        let mut dlogits = vec![0.0; b * n];
        for r in 0..b {
            let dzr = &dz[r * dzw..(r + 1) * dzw];
            let pr = &pi[r * n..(r + 1) * n];
            let dpi: Vec<f64> = (0..n)
                .map(|l| dot(&fw.h[l][r * dzw..(r + 1) * dzw], dzr))
                .collect();
            let inner = dot(pr, &dpi);
            for l in 0..n {
                axpy(pr[l], dzr, &mut dh[l][r * dzw..(r + 1) * dzw]);
                dlogits[r * n + l] = pr[l] * (dpi[l] - inner);
            }
        }
        let g = self.layout.gate.expect("gated mode has a gate");
        let mut dg = g
            .fc2
            .backward(p, grad, &fw.gate_g, &dlogits, b, true)
            .expect("dx requested");
        for (d, y) in dg.iter_mut().zip(&fw.gate_g) {
            *d *= 1.0 - y * y;
        }
        let dcat = g
            .fc1
            .backward(p, grad, &fw.gate_c, &dg, b, true)
            .expect("dx requested");
        for r in 0..b {
            for (l, dhl) in dh.iter_mut().enumerate() {
                let src = &dcat[(r * n + l) * dzw..(r * n + l + 1) * dzw];
                add_into(&mut dhl[r * dzw..(r + 1) * dzw], src);
            }
        }

        let mut dx_all = Vec::with_capacity(n);
        for (t, ex) in self.layout.experts.iter().enumerate() {
            let x = &fw.e[t];
            let mut dt = ex
                .fc2
                .backward(p, grad, &fw.t1[t], &dh[t], b, true)
                .expect("dx requested");
            for (d, y) in dt.iter_mut().zip(&fw.t1[t]) {
                *d *= 1.0 - y * y;
            }
            let mut dx = ex
                .fc1
                .backward(p, grad, x, &dt, b, true)
                .expect("dx requested");
            match &ex.shortcut {
                None => add_into(&mut dx, &dh[t]),
                Some(s) => add_into(
                    &mut dx,
                    &s.backward(p, grad, x, &dh[t], b, true).expect("dx requested"),
                ),
            }
            dx_all.push(dx);
        }

        match &self.layout.features {
            FeatureLayout::TapProjection(ps) => {
                for (t, a) in ps.iter().enumerate() {
                    a.backward(p, grad, &fw.feat[t], &dx_all[t], b, false);
                }
            }
            FeatureLayout::Full(cs) => {
                let (m, d) = (c.m, c.d);
                let half = c.d_c / 2;
                for (t, ci) in cs.iter().enumerate() {
                    let dx = &dx_all[t];
                    let mut dx_old = Vec::with_capacity(b * half);
                    let mut dx_new = Vec::with_capacity(b * half);
                    for r in 0..b {
                        dx_old.extend_from_slice(&dx[r * c.d_c..r * c.d_c + half]);
                        dx_new.extend_from_slice(&dx[r * c.d_c + half..(r + 1) * c.d_c]);
                    }
                    let pc = &fw.pools[t];
                    let dp_old = ci
                        .old_proj
                        .backward(p, grad, &pc.p_old, &dx_old, b, true)
                        .expect("dx requested");
                    let dp_new = ci
                        .new_proj
                        .backward(p, grad, &pc.p_new, &dx_new, b, true)
                        .expect("dx requested");
                    let q_old = &p[ci.old_q..ci.old_q + m * d];
                    let q_new = &p[ci.new_q..ci.new_q + m * d];
                    let empty = &p[ci.empty..ci.empty + d];
                    let mut dq_old = vec![0.0; m * d];
                    let mut dq_new = vec![0.0; m * d];
                    let mut d_empty = vec![0.0; d];
                    for (r, it) in items.iter().enumerate() {
                        let ItemInput::Full(taps) = it else {
                            unreachable!("checked in forward")
                        };
                        let tt = &taps[t];
                        let blk = r * m * d..(r + 1) * m * d;
                        attention_pool_backward(
                            &tt.old,
                            q_old,
                            &pc.w_old[r],
                            &dp_old[blk.clone()],
                            d,
                            &mut dq_old,
                            None,
                        );
                        if tt.new.is_empty() {
                            attention_pool_backward(
                                empty,
                                q_new,
                                &pc.w_new[r],
                                &dp_new[blk],
                                d,
                                &mut dq_new,
                                Some(&mut d_empty),
                            );
                        } else {
                            attention_pool_backward(
                                &tt.new,
                                q_new,
                                &pc.w_new[r],
                                &dp_new[blk],
                                d,
                                &mut dq_new,
                                None,
                            );
                        }
                    }
                    add_into(&mut grad[ci.old_q..ci.old_q + m * d], &dq_old);
                    add_into(&mut grad[ci.new_q..ci.new_q + m * d], &dq_new);
                    add_into(&mut grad[ci.empty..ci.empty + d], &d_empty);
                }
            }
            FeatureLayout::LastLayer(_) => unreachable!("handled above"),
        }
    }
}

pub fn ranker_view(c: &ModelConfig, r: &RankerIdx, p: &[f64]) -> RankerParams {
    RankerParams {
        h_max: c.h_max,
        d_z: c.d_z,
        pos_logits: p[r.pos..r.pos + c.h_max].to_vec(),
        head_w: r.head.weight(p).to_vec(),
        head_b: r.head.bias(p).to_vec(),
        cold_start: p[r.cold..r.cold + c.d_z].to_vec(),
    }
}

/// Column mean of an `n × d` f32 block, accumulated at f64.
pub fn token_mean(tokens: &[f32], d: usize) -> Vec<f64> {
    let n = tokens.len() / d;
    let mut acc = vec![0.0; d];
    for row in tokens.chunks_exact(d) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    acc.iter_mut().for_each(|v| *v /= n as f64);
    acc
}

/// Attention-pool intermediates for one tap across a batch.
#[derive(Clone, Debug)]
pub struct PoolCache {
    p_old: Vec<f64>,
    p_new: Vec<f64>,
    w_old: Vec<Vec<f64>>,
    w_new: Vec<Vec<f64>>,
}

/// Outputs and intermediates of [`Model::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    pub rows: usize,
    /// `rows × d_z`
    pub z: Vec<f64>,
    /// `rows × n_taps`, absent without a gate.
    pub pi: Option<Vec<f64>>,
    /// Per tap, `rows × d_c` expert inputs.
    pub e: Vec<Vec<f64>>,
    /// Per tap, `rows × d_z` expert outputs.
    pub h: Vec<Vec<f64>>,
    feat: Vec<Vec<f64>>,
    pools: Vec<PoolCache>,
    t1: Vec<Vec<f64>>,
    gate_c: Vec<f64>,
    gate_g: Vec<f64>,
}

impl Forward {
    pub fn z_row(&self, r: usize) -> &[f64] {
        let w = self.z.len() / self.rows.max(1);
        &self.z[r * w..(r + 1) * w]
    }

    pub fn pi_row(&self, r: usize) -> Option<&[f64]> {
        let pi = self.pi.as_ref()?;
        let n = pi.len() / self.rows.max(1);
        Some(&pi[r * n..(r + 1) * n])
    }

    /// The `n_taps × d_c` per-layer features of row `r`, flattened.
    pub fn per_layer_row(&self, r: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for e in &self.e {
            let w = e.len() / self.rows.max(1);
            out.extend_from_slice(&e[r * w..(r + 1) * w]);
        }
        out
    }
}
