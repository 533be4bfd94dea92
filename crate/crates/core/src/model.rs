//! The Neural FMM block and the deep model stacked from it.
//!
//! Every tensor handled here is a matrix with one row per box (Morton order)
//! and one column per channel. Operators are small MLPs applied row-wise.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::field::GridField;
use crate::optim::xavier_init;
use crate::oracle::LinearOperators;
use crate::params::{ParamId, ParamSet};
use crate::quadtree::{grid_to_leaves, leaves_to_grid, InteractionTables, TreeGeometry, MIN_DEPTH};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// How box positions enter the interaction translation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RopeMode {
    /// Rotate each source by its Morton offset from the target.
    Relative,
    /// Rotate each source by its own Morton index.
    Absolute,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden_width: usize,
    pub latent: usize,
    pub tree_depth: usize,
    pub operator_depth: usize,
    pub model_layers: usize,
    pub rope: RopeMode,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 2,
            out_channels: 2,
            hidden_width: 64,
            latent: 256,
            tree_depth: 6,
            operator_depth: 2,
            model_layers: 4,
            rope: RopeMode::Relative,
            rope_base: 10000.0,
        }
    }
}

fn mlp_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl ModelConfig {
    pub const KEYS: [&'static str; 9] = [
        "in_channels",
        "out_channels",
        "hidden_width",
        "latent",
        "tree_depth",
        "operator_depth",
        "model_layers",
        "rope",
        "rope_base",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.tree_depth < MIN_DEPTH || self.tree_depth > 10 {
            return Err(Error::Config(format!(
                "tree_depth must lie in [{MIN_DEPTH}, 10], got {}",
                self.tree_depth
            )));
        }
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("hidden_width", self.hidden_width),
            ("latent", self.latent),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.rope != RopeMode::None && self.hidden_width % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary encoding needs an even hidden_width, got {}",
                self.hidden_width
            )));
        }
        if !(self.rope_base > 0.0) {
            return Err(Error::Config("rope_base must be positive".into()));
        }
        Ok(())
    }

    pub fn resolution(&self) -> usize {
        1 << self.tree_depth
    }

    fn operator_sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend(std::iter::repeat(self.hidden_width).take(self.operator_depth));
        s.push(output);
        s
    }

    /// Trainable scalar count, computed from the hyperparameters alone.
    pub fn param_count(&self) -> usize {
        let w = self.hidden_width;
        let l = self.tree_depth;
        let square = mlp_count(&self.operator_sizes(w, w));
        let block = square * (2 + (l - MIN_DEPTH) + (l + 1 - MIN_DEPTH))
            + mlp_count(&self.operator_sizes(9 * w, w))
            + w * w
            + w;
        mlp_count(&[self.in_channels, self.latent, w])
            + self.model_layers * block
            + mlp_count(&[w, self.latent, self.out_channels])
    }
}

/// Dense layers with GELU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    /// `(weight [in x out], bias [out])` per layer.
    pub layers: Vec<(ParamId, ParamId)>,
    pub sizes: Vec<usize>,
}

impl Mlp {
    /// Xavier weights and zero biases, named `{name}.{i}.w` / `{name}.{i}.b`.
    pub fn new(params: &mut ParamSet, name: &str, sizes: &[usize], seed: u64) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, io)| {
                let s = derive_seed(seed, params.len() as u64);
                let w = params.add(format!("{name}.{i}.w"), xavier_init(io[0], io[1], s));
                let b = params.add(format!("{name}.{i}.b"), Tensor::zeros(&[io[1]]));
                (w, b)
            })
            .collect();
        Mlp {
            layers,
            sizes: sizes.to_vec(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.affine(h, vars[w], vars[b])?;
            if i + 1 < self.layers.len() {
                h = tape.gelu(h);
            }
        }
        Ok(h)
    }

    /// Sets a single-layer operator to `x -> M x` (weights hold `M^T`) with
    /// zero bias.
    pub fn freeze_linear(&self, params: &mut ParamSet, m: &Tensor) -> Result<()> {
        let &[(w, b)] = self.layers.as_slice() else {
            return Err(Error::Config(format!(
                "only single-layer operators can be frozen, this one has {} layers",
                self.layers.len()
            )));
        };
        let (rows, cols) = (m.rows(), m.cols());
        if params.get(w).shape() != [cols, rows] {
            return Err(Error::shape("freeze_linear", params.get(w).shape(), &[cols, rows]));
        }
        let wt = params.get_mut(w).data_mut();
        for i in 0..rows {
            for j in 0..cols {
                wt[j * rows + i] = m.data()[i * cols + j];
            }
        }
        params.get_mut(b).data_mut().fill(0.0);
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().expect("at least one layer")
    }
}

/// One kernel integral layer realised by the three FMM passes.
#[derive(Clone, Debug)]
pub struct NeuralFmmBlock {
    pub depth: usize,
    pub width: usize,
    pub rope: RopeMode,
    pub rope_base: f64,
    pub ofs: Mlp,
    /// Index `l - 2` for `l` in `2..L`: child-to-parent merge into level `l`
    /// and parent-to-child shift into level `l + 1`.
    pub ofo_ifi: Vec<Mlp>,
    /// Index `k - 2` for `k` in `2..=L`.
    pub ifo: Vec<Mlp>,
    pub tfi: Mlp,
    pub near: Mlp,
    pub w: ParamId,
    pub b: ParamId,
}

fn positions(n: usize) -> Arc<[i64]> {
    (0..n as i64).collect()
}

impl NeuralFmmBlock {
    pub fn new(params: &mut ParamSet, name: &str, cfg: &ModelConfig, seed: u64) -> Self {
        let w = cfg.hidden_width;
        let l = cfg.tree_depth;
        let sq = cfg.operator_sizes(w, w);
        let ofs = Mlp::new(params, &format!("{name}.ofs"), &sq, seed);
        let ofo_ifi = (MIN_DEPTH..l)
            .map(|k| Mlp::new(params, &format!("{name}.ofo_ifi.{k}"), &sq, seed))
            .collect();
        let ifo = (MIN_DEPTH..=l)
            .map(|k| Mlp::new(params, &format!("{name}.ifo.{k}"), &sq, seed))
            .collect();
        let tfi = Mlp::new(params, &format!("{name}.tfi"), &sq, seed);
        let near = Mlp::new(params, &format!("{name}.near"), &cfg.operator_sizes(9 * w, w), seed);
        let ws = derive_seed(seed, params.len() as u64);
        let wid = params.add(format!("{name}.w"), xavier_init(w, w, ws));
        let bid = params.add(format!("{name}.b"), Tensor::zeros(&[w]));
        NeuralFmmBlock {
            depth: l,
            width: w,
            rope: cfg.rope,
            rope_base: cfg.rope_base,
            ofs,
            ofo_ifi,
            ifo,
            tfi,
            near,
            w: wid,
            b: bid,
        }
    }

    /// Freezes `ofs`, `ofo_ifi`, `ifo` and `tfi` to the given matrices.
    pub fn freeze_linear(&self, params: &mut ParamSet, ops: &LinearOperators) -> Result<()> {
        if ops.ofo_ifi.len() != self.ofo_ifi.len() || ops.ifo.len() != self.ifo.len() {
            return Err(Error::Config(format!("operators are for a different depth than {}", self.depth)));
        }
        self.ofs.freeze_linear(params, &ops.ofs)?;
        for (op, m) in self.ofo_ifi.iter().zip(&ops.ofo_ifi).chain(self.ifo.iter().zip(&ops.ifo)) {
            op.freeze_linear(params, m)?;
        }
        self.tfi.freeze_linear(params, &ops.tfi)
    }

    fn check_tables(&self, tables: &InteractionTables) -> Result<()> {
        if tables.depth != self.depth || tables.levels.len() != self.depth + 1 {
            return Err(Error::Config(format!(
                "block built for depth {} but tables have depth {}",
                self.depth, tables.depth
            )));
        }
        Ok(())
    }

    /// Outgoing vectors `q`, indexed by level (entries below 2 are unused
    /// and hold the level-2 value).
    pub fn upward_pass(&self, tape: &mut Tape, vars: &[Var], tables: &InteractionTables, v: Var) -> Result<Vec<Var>> {
        self.check_tables(tables)?;
        let leaves = 1usize << (2 * self.depth);
        if tape.shape(v) != [leaves, self.width] {
            return Err(Error::shape("upward_pass", tape.shape(v), &[leaves, self.width]));
        }
        let mut q = vec![v; self.depth + 1];
        q[self.depth] = self.ofs.forward(tape, vars, v)?;
        for l in (MIN_DEPTH..self.depth).rev() {
            let shifted = self.ofo_ifi[l - MIN_DEPTH].forward(tape, vars, q[l + 1])?;
            let zeros = tape.constant(&Tensor::zeros(&[1 << (2 * l), self.width]));
            q[l] = tape.scatter_add(zeros, tables.level(l + 1).parent.clone(), shifted)?;
        }
        for l in 0..MIN_DEPTH {
            q[l] = q[MIN_DEPTH];
        }
        Ok(q)
    }

    /// Interaction-list contribution at level `k`.
    fn far_translate(&self, tape: &mut Tape, vars: &[Var], tables: &InteractionTables, k: usize, qk: Var) -> Result<Var> {
        let lt = tables.level(k);
        let op = &self.ifo[k - MIN_DEPTH];
        let n = lt.box_count();
        let translated = match self.rope {
            RopeMode::Relative => {
                let src = tape.gather_rows(qk, lt.pair_source.clone())?;
                let rot = tape.rope(src, lt.pair_morton_delta.clone(), self.rope_base)?;
                op.forward(tape, vars, rot)?
            }
            RopeMode::Absolute => {
                let rot = tape.rope(qk, positions(n), self.rope_base)?;
                let per_box = op.forward(tape, vars, rot)?;
                tape.gather_rows(per_box, lt.pair_source.clone())?
            }
            RopeMode::None => {
                let per_box = op.forward(tape, vars, qk)?;
                tape.gather_rows(per_box, lt.pair_source.clone())?
            }
        };
        let zeros = tape.constant(&Tensor::zeros(&[n, self.width]));
        tape.scatter_add(zeros, lt.pair_target.clone(), translated)
    }

    /// Incoming vector `h` at the leaf level.
    pub fn downward_pass(&self, tape: &mut Tape, vars: &[Var], tables: &InteractionTables, q: &[Var]) -> Result<Var> {
        self.check_tables(tables)?;
        if q.len() != self.depth + 1 {
            return Err(Error::Config(format!(
                "downward pass needs {} levels of outgoing vectors, got {}",
                self.depth + 1,
                q.len()
            )));
        }
        let mut h = self.far_translate(tape, vars, tables, MIN_DEPTH, q[MIN_DEPTH])?;
        for k in MIN_DEPTH + 1..=self.depth {
            let far = self.far_translate(tape, vars, tables, k, q[k])?;
            let inherited = tape.gather_rows(h, tables.level(k).parent.clone())?;
            let shifted = self.ofo_ifi[k - 1 - MIN_DEPTH].forward(tape, vars, inherited)?;
            h = tape.add(shifted, far)?;
        }
        Ok(h)
    }

    /// Direct evaluation over the zero-padded 3x3 leaf neighbourhood of `v`.
    pub fn near_field(&self, tape: &mut Tape, vars: &[Var], tables: &InteractionTables, v: Var) -> Result<Var> {
        let n = tape.shape(v)[0];
        let stencil = tape.gather_rows(v, tables.near_stencil.clone())?;
        let flat = tape.reshape(stencil, vec![n, 9 * self.width])?;
        self.near.forward(tape, vars, flat)
    }

    pub fn leaf_pass(&self, tape: &mut Tape, vars: &[Var], tables: &InteractionTables, h: Var, v: Var) -> Result<Var> {
        let far = self.tfi.forward(tape, vars, h)?;
        let near = self.near_field(tape, vars, tables, v)?;
        tape.add(far, near)
    }

    /// `tfi(h_L)`: everything the block delivers from outside the 3x3
    /// neighbourhood.
    pub fn far_field(&self, tape: &mut Tape, vars: &[Var], tables: &InteractionTables, v: Var) -> Result<Var> {
        let q = self.upward_pass(tape, vars, tables, v)?;
        let h = self.downward_pass(tape, vars, tables, &q)?;
        self.tfi.forward(tape, vars, h)
    }

    /// Upward, downward and leaf passes without the pointwise path.
    pub fn kernel(&self, tape: &mut Tape, vars: &[Var], tables: &InteractionTables, v: Var) -> Result<Var> {
        let q = self.upward_pass(tape, vars, tables, v)?;
        let h = self.downward_pass(tape, vars, tables, &q)?;
        self.leaf_pass(tape, vars, tables, h, v)
    }

    /// `gelu(v W + b + K(v))`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], tables: &InteractionTables, v: Var) -> Result<Var> {
        let k = self.kernel(tape, vars, tables, v)?;
        let lin = tape.matmul(v, vars[self.w])?;
        let lin = tape.add_bias(lin, vars[self.b])?;
        let z = tape.add(lin, k)?;
        Ok(tape.gelu(z))
    }
}

/// Lifting, stacked blocks, projection.
#[derive(Clone, Debug)]
pub struct DeepNeuralFmm {
    pub config: ModelConfig,
    pub lift: Mlp,
    pub blocks: Vec<NeuralFmmBlock>,
    pub proj: Mlp,
}

impl DeepNeuralFmm {
    /// Builds the model and its freshly initialised parameters.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<(Self, ParamSet)> {
        let mut params = ParamSet::new();
        let model = Self::with_params(config, &mut params, seed)?;
        Ok((model, params))
    }

    pub fn with_params(config: &ModelConfig, params: &mut ParamSet, seed: u64) -> Result<Self> {
        config.validate()?;
        let w = config.hidden_width;
        let lift = Mlp::new(params, "lift", &[config.in_channels, config.latent, w], seed);
        let blocks = (0..config.model_layers)
            .map(|i| NeuralFmmBlock::new(params, &format!("block{i}"), config, seed))
            .collect();
        let proj = Mlp::new(params, "proj", &[w, config.latent, config.out_channels], seed);
        Ok(DeepNeuralFmm {
            config: config.clone(),
            lift,
            blocks,
            proj,
        })
    }

    /// Forward over leaf rows `[4^L x in_channels]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], tables: &InteractionTables, input: Var) -> Result<Var> {
        let leaves = 1usize << (2 * self.config.tree_depth);
        if tape.shape(input) != [leaves, self.config.in_channels] {
            return Err(Error::shape(
                "deep_forward",
                tape.shape(input),
                &[leaves, self.config.in_channels],
            ));
        }
        let mut v = self.lift.forward(tape, vars, input)?;
        for b in &self.blocks {
            v = b.forward(tape, vars, tables, v)?;
        }
        self.proj.forward(tape, vars, v)
    }

    /// Inference on a grid field.
    pub fn deep_forward(
        &self,
        params: &ParamSet,
        geometry: &TreeGeometry,
        tables: &InteractionTables,
        input: &GridField,
    ) -> Result<GridField> {
        let res = self.config.resolution();
        if input.resolution() != res || input.channels() != self.config.in_channels {
            return Err(Error::Config(format!(
                "model expects {res}x{res} input with {} channels, got {}x{} with {}",
                self.config.in_channels,
                input.resolution(),
                input.resolution(),
                input.channels()
            )));
        }
        let leaves = grid_to_leaves(input, geometry)?;
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let x = tape.constant(&leaves);
        let y = self.forward(&mut tape, &vars, tables, x)?;
        leaves_to_grid(&tape.tensor(y), geometry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::rope_rotate;
    use crate::quadtree::{build_geometry, build_interaction_tables};

    fn small(depth: usize) -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            out_channels: 2,
            hidden_width: 4,
            latent: 6,
            tree_depth: depth,
            operator_depth: 1,
            model_layers: 2,
            rope: RopeMode::Relative,
            rope_base: 10000.0,
        }
    }

    #[test]
    fn param_count_matches_built_model() {
        for cfg in [small(2), small(3), ModelConfig::default()] {
            let (_, p) = DeepNeuralFmm::new(&cfg, 1).unwrap();
            assert_eq!(p.count(), cfg.param_count());
        }
    }

    #[test]
    fn one_translation_operator_per_level() {
        let (m, p) = DeepNeuralFmm::new(&small(4), 1).unwrap();
        let b = &m.blocks[0];
        assert_eq!(b.ifo.len(), 3);
        assert_eq!(b.ofo_ifi.len(), 2);
        assert!(p.find("block0.ifo.4.0.w").is_some());
        assert!(p.find("block1.ofo_ifi.3.1.b").is_some());
        assert!(p.find("block0.ofo_ifi.4.0.w").is_none());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small(3);
        c.tree_depth = 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = small(3);
        c.hidden_width = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.rope = RopeMode::None;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn wrong_resolution_is_a_config_error() {
        let cfg = small(3);
        let (m, p) = DeepNeuralFmm::new(&cfg, 1).unwrap();
        let g = build_geometry(3, 1.0).unwrap();
        let t = build_interaction_tables(&g);
        let bad = GridField::zeros(16, 3);
        assert!(matches!(m.deep_forward(&p, &g, &t, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn zero_input_is_a_fixed_point() {
        let cfg = small(3);
        let (m, p) = DeepNeuralFmm::new(&cfg, 7).unwrap();
        let g = build_geometry(3, 1.0).unwrap();
        let t = build_interaction_tables(&g);
        let out = m.deep_forward(&p, &g, &t, &GridField::zeros(8, 3)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small(3);
        let g = build_geometry(3, 1.0).unwrap();
        let t = build_interaction_tables(&g);
        let input = GridField::from_fn(8, 3, |x, y, c| ((x * 3 + y * 5 + c) as f64).sin());
        let (m1, p1) = DeepNeuralFmm::new(&cfg, 11).unwrap();
        let (m2, p2) = DeepNeuralFmm::new(&cfg, 11).unwrap();
        let a = m1.deep_forward(&p1, &g, &t, &input).unwrap();
        let b = m2.deep_forward(&p2, &g, &t, &input).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.channels(), 2);
    }

    #[test]
    fn rope_modes_agree_on_shapes() {
        let g = build_geometry(3, 1.0).unwrap();
        let t = build_interaction_tables(&g);
        let input = GridField::from_fn(8, 3, |x, y, c| (x + 2 * y + c) as f64 * 0.1);
        for mode in [RopeMode::Relative, RopeMode::Absolute, RopeMode::None] {
            let mut cfg = small(3);
            cfg.rope = mode;
            let (m, p) = DeepNeuralFmm::new(&cfg, 3).unwrap();
            let out = m.deep_forward(&p, &g, &t, &input).unwrap();
            assert!(out.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn rope_rotate_basics() {
        let v = [0.3, -1.2, 0.5, 2.0];
        assert_eq!(rope_rotate(&v, 0, 10000.0).unwrap(), v.to_vec());
        let r = rope_rotate(&v, 17, 10000.0).unwrap();
        let n = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((n(&r) - n(&v)).abs() < 1e-12);
        assert!(matches!(rope_rotate(&[1.0, 2.0, 3.0], 1, 10.0), Err(Error::Config(_))));
    }
}
