//! A small diffusion transformer with adaLN conditioning and 2-D rotary
//! attention, plus low-rank weight-modulation adapters.
//!
//! Data flow for one image: patchify → patch embedding → `depth` blocks →
//! adaLN final layer → per-patch ε prediction. The condition vector
//! `c = timestep_embedding(t) + y_embed[y]` goes through a two-layer MLP that
//! emits every block's shift/scale/gate signals at once.
//!
//! A wrapped layer computes its weight as `W ⊙ (Γ_out·Γ_in) + B_out·B_in`
//! with `W` frozen. Identity initialization makes the product exactly `W`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, RotationTable, Var};
use crate::error::{param_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DiTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Source classes; rows of the base embedding table.
    pub num_classes: usize,
    /// Diffusion horizon the model is trained for.
    pub steps: usize,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch: 4,
            dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 10,
            steps: 1000,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(param_err(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.heads == 0 || self.dim % (4 * self.heads) != 0 {
            return Err(param_err(format!(
                "dim {} must be divisible by 4·heads = {}",
                self.dim,
                4 * self.heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.channels == 0 || self.num_classes == 0 {
            return Err(param_err("depth, mlp_ratio, channels and num_classes must be positive"));
        }
        if self.steps == 0 {
            return Err(param_err("diffusion horizon must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Width of the condition MLP output: six signals per block plus the
    /// final layer's shift and scale.
    pub fn signal_width(&self) -> usize {
        (6 * self.depth + 2) * self.dim
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_size, self.image_size, self.channels]
    }
}

/// Role of a parameter tensor, used for freezing policies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    EmbeddingBase,
    EmbeddingExpanded,
    AdapterGamma,
    AdapterShift,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub role: ParamRole,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered registry of named parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    fn add(&mut self, name: String, value: Tensor<F>, role: ParamRole) -> ParamId {
        self.params.push(Param {
            name,
            value,
            role,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}

/// Trainable low-rank factors attached to a frozen linear layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adapter {
    pub gamma_out: ParamId,
    pub gamma_in: ParamId,
    pub b_out: ParamId,
    pub b_in: ParamId,
    pub rank: usize,
}

/// `y = x · W̃ᵀ + bias`, with `W` stored as `[d_out × d_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub adapter: Option<Adapter>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub qkv: Linear,
    pub proj: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Class/condition embedding rows: the pretrained source rows plus any rows
/// appended for new target conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEmbeddingTable {
    pub base: ParamId,
    pub base_rows: usize,
    pub expanded: Option<ParamId>,
    pub expanded_rows: usize,
}

impl ConditionEmbeddingTable {
    pub fn rows(&self) -> usize {
        self.base_rows + self.expanded_rows
    }
}

/// Sinusoidal timestep features: `dim/2` sines followed by `dim/2` cosines
/// over geometric frequencies.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = Float::exp(-Float::ln(10_000.0f64) * k as f64 / half as f64);
        let arg = t as f64 * freq;
        out[k] = Float::sin(arg);
        out[half + k] = Float::cos(arg);
    }
    out
}

/// Fixed 2-D sin-cos table `[rows·cols × dim]`: the first `dim/2` features
/// encode the token's row, the rest its column. It carries no parameters.
pub fn position_table<F: Scalar>(rows: usize, cols: usize, dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        let er = timestep_embedding(r, half);
        for c in 0..cols {
            data.extend(er.iter().map(|&v| F::of(v)));
            data.extend(timestep_embedding(c, dim - half).into_iter().map(F::of));
        }
    }
    Tensor::from_fn(&[rows * cols, dim], |i| data[i])
}

/// Splits an `[H × W × C]` image into `(H/p)(W/p)` row-major tokens of
/// length `p·p·C`, each ordered (row-in-patch, col-in-patch, channel).
pub fn patchify<F: Scalar>(image: &Tensor<F>, patch: usize) -> Result<Tensor<F>> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Shape {
            op: "patchify",
            detail: format!("expected [H, W, C], got {shape:?}"),
        });
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(param_err(format!("image {h}×{w} not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for gi in 0..gh {
        for gj in 0..gw {
            for pi in 0..patch {
                let row = gi * patch + pi;
                let start = (row * w + gj * patch) * c;
                out.extend_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    Tensor::new(&[gh * gw, patch * patch * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<F: Scalar>(tokens: &Tensor<F>, patch: usize, h: usize, w: usize, c: usize) -> Result<Tensor<F>> {
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(param_err(format!("image {h}×{w} not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    if tokens.shape() != [gh * gw, patch * patch * c] {
        return Err(Error::Shape {
            op: "unpatchify",
            detail: format!("tokens {:?} do not tile a {h}×{w}×{c} image", tokens.shape()),
        });
    }
    let src = tokens.data();
    let mut out = vec![F::zero(); h * w * c];
    let mut k = 0;
    for gi in 0..gh {
        for gj in 0..gw {
            for pi in 0..patch {
                let row = gi * patch + pi;
                let start = (row * w + gj * patch) * c;
                out[start..start + patch * c].copy_from_slice(&src[k..k + patch * c]);
                k += patch * c;
            }
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// Rotation angles for a `rows × cols` token grid (row-major token order).
///
/// For a head of width `head_dim`, the first half of its dimensions rotates
/// with the row index and the second half with the column index; within each
/// half, pair `k` uses frequency `10000^(−2k / (head_dim/2))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeGrid {
    pub rows: usize,
    pub cols: usize,
    pub head_dim: usize,
    pub base: f64,
}

impl RopeGrid {
    pub fn new(rows: usize, cols: usize, head_dim: usize) -> Result<Self> {
        if head_dim % 4 != 0 || head_dim == 0 {
            return Err(param_err(format!(
                "RoPE head dim {head_dim} must split into two even halves"
            )));
        }
        Ok(Self {
            rows,
            cols,
            head_dim,
            base: 10_000.0,
        })
    }

    pub fn pairs(&self) -> usize {
        self.head_dim / 2
    }

    fn freq(&self, k: usize) -> f64 {
        let half = (self.head_dim / 2) as f64;
        Float::powf(self.base, -2.0 * k as f64 / half)
    }

    /// Angles of position `(i, j)`, one per column pair.
    pub fn angles_at(&self, i: f64, j: f64) -> Vec<f64> {
        let q = self.head_dim / 4;
        (0..2 * q)
            .map(|p| if p < q { i * self.freq(p) } else { j * self.freq(p - q) })
            .collect()
    }

    /// Rotation table for every grid position, offset by `(di, dj)`.
    pub fn table_with_offset<F: Scalar>(&self, di: f64, dj: f64) -> Result<RotationTable<F>> {
        let mut angles = Vec::with_capacity(self.rows * self.cols * self.pairs());
        for i in 0..self.rows {
            for j in 0..self.cols {
                angles.extend(self.angles_at(i as f64 + di, j as f64 + dj));
            }
        }
        RotationTable::from_angles(self.rows * self.cols, self.pairs(), &angles)
    }

    pub fn table<F: Scalar>(&self) -> Result<RotationTable<F>> {
        self.table_with_offset(0.0, 0.0)
    }

    /// Dense block-diagonal rotation matrix `P_{i,j}` (`head_dim × head_dim`),
    /// acting on column vectors.
    pub fn dense_matrix(&self, i: f64, j: f64) -> Vec<f64> {
        let d = self.head_dim;
        let mut m = vec![0.0; d * d];
        for (p, a) in self.angles_at(i, j).into_iter().enumerate() {
            let (c, s) = (Float::cos(a), Float::sin(a));
            let (r0, r1) = (2 * p, 2 * p + 1);
            m[r0 * d + r0] = c;
            m[r0 * d + r1] = -s;
            m[r1 * d + r0] = s;
            m[r1 * d + r1] = c;
        }
        m
    }
}

/// Rotates per-head token vectors `[tokens × head_dim]` in place of the grid.
pub fn rope_apply<F: Scalar>(vectors: &Tensor<F>, table: &RotationTable<F>) -> Result<Tensor<F>> {
    let (rows, cols) = vectors.as_matrix();
    if rows != table.rows() || cols != 2 * table.pairs() {
        return Err(Error::Shape {
            op: "rope_apply",
            detail: format!(
                "vectors {rows}×{cols} vs grid of {} positions × {} dims",
                table.rows(),
                2 * table.pairs()
            ),
        });
    }
    Tensor::new(vectors.shape(), table.apply(vectors.data(), cols, false))
}

/// Graph handles for one forward pass: every parameter as a leaf, plus the
/// effective weight of each wrapped layer.
pub struct Bound {
    vars: Vec<Var>,
    effective: BTreeMap<ParamId, Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient of every parameter, in registry order.
    pub fn grads<F: Scalar>(&self, g: &Graph<F>) -> Vec<Option<Tensor<F>>> {
        self.vars.iter().map(|v| g.grad(*v).cloned()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiT<F> {
    config: DiTConfig,
    params: ParamStore<F>,
    patch_embed: Linear,
    cond_fc1: Linear,
    cond_fc2: Linear,
    blocks: Vec<Block>,
    final_linear: Linear,
    embeddings: ConditionEmbeddingTable,
    rope: Arc<RotationTable<F>>,
    /// Fixed absolute positions, added after the patch embedding.
    position: Arc<Tensor<F>>,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

const EMBED_STD: f64 = 0.5;
const NORM_EPS: f64 = 1e-6;

impl<F: Scalar> DiT<F> {
    /// Randomly initialised model. The condition MLP's output layer and the
    /// final projection start at zero, so every block begins as identity.
    pub fn new<R: Rng>(config: DiTConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let d = config.dim;
        let linear = |params: &mut ParamStore<F>, name: &str, d_in: usize, d_out: usize, zero: bool, rng: &mut R| {
            let bound = (6.0 / (d_in + d_out) as f64).sqrt();
            let w = Tensor::from_fn(&[d_out, d_in], |_| {
                if zero {
                    F::zero()
                } else {
                    F::of(rng.random_range(-bound..bound))
                }
            });
            let weight = params.add(format!("{name}.weight"), w, ParamRole::Weight);
            let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), ParamRole::Bias);
            Linear {
                name: name.to_string(),
                weight,
                bias,
                d_in,
                d_out,
                adapter: None,
            }
        };
        let patch_embed = linear(&mut params, "patch_embed", config.patch_dim(), d, false, rng);
        let table = Tensor::from_fn(&[config.num_classes, d], |_| F::of(EMBED_STD * normal(rng)));
        let base = params.add("y_embed.base".into(), table, ParamRole::EmbeddingBase);
        let cond_fc1 = linear(&mut params, "cond.fc1", d, d, false, rng);
        let cond_fc2 = linear(&mut params, "cond.fc2", d, config.signal_width(), true, rng);
        let hidden = d * config.mlp_ratio;
        let blocks = (0..config.depth)
            .map(|i| Block {
                qkv: linear(&mut params, &format!("blocks.{i}.attn.qkv"), d, 3 * d, false, rng),
                proj: linear(&mut params, &format!("blocks.{i}.attn.proj"), d, d, false, rng),
                fc1: linear(&mut params, &format!("blocks.{i}.mlp.fc1"), d, hidden, false, rng),
                fc2: linear(&mut params, &format!("blocks.{i}.mlp.fc2"), hidden, d, false, rng),
            })
            .collect();
        let final_linear = linear(&mut params, "final.linear", d, config.patch_dim(), true, rng);
        let grid = RopeGrid::new(config.grid(), config.grid(), config.head_dim())?;
        Ok(Self {
            rope: Arc::new(grid.table()?),
            position: Arc::new(position_table(config.grid(), config.grid(), d)),
            embeddings: ConditionEmbeddingTable {
                base,
                base_rows: config.num_classes,
                expanded: None,
                expanded_rows: 0,
            },
            config,
            params,
            patch_embed,
            cond_fc1,
            cond_fc2,
            blocks,
            final_linear,
        })
    }

    pub fn config(&self) -> &DiTConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn embeddings(&self) -> &ConditionEmbeddingTable {
        &self.embeddings
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn rope_grid(&self) -> RopeGrid {
        RopeGrid::new(self.config.grid(), self.config.grid(), self.config.head_dim())
            .expect("validated at construction")
    }

    /// Layers that receive modulation adapters: each block's QKV and output
    /// projections and both layers of the condition MLP.
    pub fn target_layers(&self) -> Vec<&Linear> {
        let mut out = vec![&self.cond_fc1, &self.cond_fc2];
        for b in &self.blocks {
            out.push(&b.qkv);
            out.push(&b.proj);
        }
        out
    }

    pub fn all_linears(&self) -> Vec<&Linear> {
        let mut out = vec![&self.patch_embed, &self.cond_fc1, &self.cond_fc2];
        for b in &self.blocks {
            out.extend([&b.qkv, &b.proj, &b.fc1, &b.fc2]);
        }
        out.push(&self.final_linear);
        out
    }

    pub fn is_wrapped(&self) -> bool {
        self.cond_fc1.adapter.is_some()
    }

    pub fn adapter_rank(&self) -> Option<usize> {
        self.cond_fc1.adapter.map(|a| a.rank)
    }

    /// Attaches identity-initialised adapters of rank `rank` to every target layer.
    pub fn wrap_modulation<R: Rng>(&mut self, rank: usize, rng: &mut R) -> Result<()> {
        if self.is_wrapped() {
            return Err(Error::Contract("model already carries adapters".into()));
        }
        let mut layers: Vec<&mut Linear> = vec![&mut self.cond_fc1, &mut self.cond_fc2];
        for b in &mut self.blocks {
            layers.push(&mut b.qkv);
            layers.push(&mut b.proj);
        }
        for layer in layers {
            if rank == 0 || rank > layer.d_out.min(layer.d_in) {
                return Err(param_err(format!(
                    "rank {rank} invalid for {} ({}×{})",
                    layer.name, layer.d_out, layer.d_in
                )));
            }
            let (o, i) = (layer.d_out, layer.d_in);
            let p = &mut self.params;
            let gamma_out = p.add(
                format!("{}.gamma_out", layer.name),
                Tensor::zeros(&[o, rank]),
                ParamRole::AdapterGamma,
            );
            let gamma_in = p.add(
                format!("{}.gamma_in", layer.name),
                Tensor::zeros(&[rank, i]),
                ParamRole::AdapterGamma,
            );
            let b_out = p.add(
                format!("{}.b_out", layer.name),
                Tensor::zeros(&[o, rank]),
                ParamRole::AdapterShift,
            );
            let b_in = p.add(
                format!("{}.b_in", layer.name),
                Tensor::zeros(&[rank, i]),
                ParamRole::AdapterShift,
            );
            let adapter = Adapter {
                gamma_out,
                gamma_in,
                b_out,
                b_in,
                rank,
            };
            init_modulation_identity(p, &adapter, rng);
            layer.adapter = Some(adapter);
        }
        Ok(())
    }

    /// Appends `rows` condition embeddings (random until initialised).
    pub fn expand_conditions<R: Rng>(&mut self, rows: usize, rng: &mut R) -> Result<()> {
        if self.embeddings.expanded.is_some() {
            return Err(Error::Contract("embedding table already expanded".into()));
        }
        if rows == 0 {
            return Err(param_err("expansion needs at least one row"));
        }
        let d = self.config.dim;
        let t = Tensor::from_fn(&[rows, d], |_| F::of(EMBED_STD * normal(rng)));
        let id = self
            .params
            .add("y_embed.expanded".into(), t, ParamRole::EmbeddingExpanded);
        self.embeddings.expanded = Some(id);
        self.embeddings.expanded_rows = rows;
        Ok(())
    }

    /// Copies base row `sources[j]` into expanded row `j`.
    pub fn copy_embedding_rows(&mut self, sources: &[usize]) -> Result<()> {
        let table = &self.embeddings;
        let Some(exp) = table.expanded else {
            return Err(Error::Contract("embedding table has no expanded rows".into()));
        };
        if sources.len() != table.expanded_rows {
            return Err(param_err(format!(
                "{} assignments for {} new rows",
                sources.len(),
                table.expanded_rows
            )));
        }
        let d = self.config.dim;
        let base = self.params.get(table.base).value.clone();
        let base_rows = table.base_rows;
        let dst = self.params.get_mut(exp).value.data_mut();
        for (j, &src) in sources.iter().enumerate() {
            if src >= base_rows {
                return Err(Error::Index {
                    index: src,
                    len: base_rows,
                });
            }
            dst[j * d..(j + 1) * d].copy_from_slice(&base.data()[src * d..(src + 1) * d]);
        }
        Ok(())
    }

    /// Row `y` of the combined table.
    pub fn embedding_row(&self, y: usize) -> Result<Vec<F>> {
        let d = self.config.dim;
        let t = &self.embeddings;
        let (id, r) = if y < t.base_rows {
            (t.base, y)
        } else if y < t.rows() {
            (t.expanded.expect("rows() counts expanded"), y - t.base_rows)
        } else {
            return Err(Error::Index {
                index: y,
                len: t.rows(),
            });
        };
        Ok(self.params.get(id).value.data()[r * d..(r + 1) * d].to_vec())
    }

    /// Copy of the model in another precision.
    pub fn cast<G: Scalar>(&self) -> Result<DiT<G>> {
        let params = ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    role: p.role,
                    trainable: p.trainable,
                })
                .collect(),
        };
        let grid = self.rope_grid();
        Ok(DiT {
            config: self.config.clone(),
            params,
            patch_embed: self.patch_embed.clone(),
            cond_fc1: self.cond_fc1.clone(),
            cond_fc2: self.cond_fc2.clone(),
            blocks: self.blocks.clone(),
            final_linear: self.final_linear.clone(),
            embeddings: self.embeddings.clone(),
            rope: Arc::new(grid.table()?),
            position: Arc::new(position_table(self.config.grid(), self.config.grid(), self.config.dim)),
        })
    }

    /// Puts every parameter on the graph. Trainable parameters require grad
    /// when `with_grad` is set.
    pub fn bind(&self, g: &mut Graph<F>, with_grad: bool) -> Result<Bound> {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), with_grad && p.trainable))
            .collect();
        let mut effective = BTreeMap::new();
        for layer in self.all_linears() {
            if let Some(a) = layer.adapter {
                let w = vars[layer.weight.0];
                let gamma = g.matmul(vars[a.gamma_out.0], vars[a.gamma_in.0])?;
                let shift = g.matmul(vars[a.b_out.0], vars[a.b_in.0])?;
                let scaled = g.mul(w, gamma)?;
                effective.insert(layer.weight, g.add(scaled, shift)?);
            }
        }
        Ok(Bound { vars, effective })
    }

    fn weight_var(&self, b: &Bound, layer: &Linear) -> Var {
        b.effective
            .get(&layer.weight)
            .copied()
            .unwrap_or_else(|| b.var(layer.weight))
    }

    pub fn linear_forward(&self, g: &mut Graph<F>, b: &Bound, layer: &Linear, x: Var) -> Result<Var> {
        let w = self.weight_var(b, layer);
        let y = g.matmul_nt(x, w)?;
        g.add_row(y, b.var(layer.bias))
    }

    /// `[1 × signal_width]` adaLN signals for timestep `t` and condition `y`.
    pub fn condition_signals(&self, g: &mut Graph<F>, b: &Bound, t: usize, y: usize) -> Result<Var> {
        if t > self.config.steps {
            return Err(Error::Index {
                index: t,
                len: self.config.steps,
            });
        }
        let d = self.config.dim;
        let temb: Vec<F> = timestep_embedding(t, d).into_iter().map(F::of).collect();
        let temb = g.constant(Tensor::new(&[1, d], temb)?);
        let yemb = self.embed(g, b, y)?;
        let c = g.add(temb, yemb)?;
        let h = self.linear_forward(g, b, &self.cond_fc1, c)?;
        let h = g.gelu(h)?;
        self.linear_forward(g, b, &self.cond_fc2, h)
    }

    fn embed(&self, g: &mut Graph<F>, b: &Bound, y: usize) -> Result<Var> {
        let t = &self.embeddings;
        if y < t.base_rows {
            g.gather_row(b.var(t.base), y)
        } else if y < t.rows() {
            g.gather_row(b.var(t.expanded.expect("rows() counts expanded")), y - t.base_rows)
        } else {
            Err(Error::Index {
                index: y,
                len: t.rows(),
            })
        }
    }

    fn modulate(&self, g: &mut Graph<F>, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let n = g.layernorm(x, None, None, F::of(NORM_EPS))?;
        let s1 = g.add_scalar(scale, F::one())?;
        let y = g.mul_row(n, s1)?;
        g.add_row(y, shift)
    }

    /// Multi-head self-attention with RoPE on queries and keys.
    pub fn attention(&self, g: &mut Graph<F>, b: &Bound, block: &Block, x: Var) -> Result<Var> {
        self.attention_with_table(g, b, block, x, self.rope.clone())
    }

    /// [`Self::attention`] with explicit token positions.
    pub fn attention_with_table(
        &self,
        g: &mut Graph<F>,
        b: &Bound,
        block: &Block,
        x: Var,
        table: Arc<RotationTable<F>>,
    ) -> Result<Var> {
        let d = self.config.dim;
        let hd = self.config.head_dim();
        let qkv = self.linear_forward(g, b, &block.qkv, x)?;
        let scale = F::of(1.0 / (hd as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let q = g.slice_cols(qkv, h * hd, hd)?;
            let k = g.slice_cols(qkv, d + h * hd, hd)?;
            let v = g.slice_cols(qkv, 2 * d + h * hd, hd)?;
            let q = g.rotate(q, table.clone())?;
            let k = g.rotate(k, table.clone())?;
            let logits = g.matmul_nt(q, k)?;
            let logits = g.scale(logits, scale)?;
            let attn = g.softmax(logits, 1)?;
            heads.push(g.matmul(attn, v)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        self.linear_forward(g, b, &block.proj, merged)
    }

    fn mlp(&self, g: &mut Graph<F>, b: &Bound, block: &Block, x: Var) -> Result<Var> {
        let h = self.linear_forward(g, b, &block.fc1, x)?;
        let h = g.gelu(h)?;
        self.linear_forward(g, b, &block.fc2, h)
    }

    /// One transformer block; `signals` holds this block's six adaLN signals
    /// `[shift_a, scale_a, gate_a, shift_m, scale_m, gate_m]`.
    pub fn block_forward(&self, g: &mut Graph<F>, b: &Bound, block: &Block, x: Var, signals: &[Var; 6]) -> Result<Var> {
        let [shift_a, scale_a, gate_a, shift_m, scale_m, gate_m] = *signals;
        let h = self.modulate(g, x, shift_a, scale_a)?;
        let h = self.attention(g, b, block, h)?;
        let h = g.mul_row(h, gate_a)?;
        let x = g.add(x, h)?;
        let h = self.modulate(g, x, shift_m, scale_m)?;
        let h = self.mlp(g, b, block, h)?;
        let h = g.mul_row(h, gate_m)?;
        g.add(x, h)
    }

    /// ε prediction in token layout for patchified input `[tokens × patch_dim]`.
    pub fn forward_tokens(&self, g: &mut Graph<F>, b: &Bound, x: Var, t: usize, y: usize) -> Result<Var> {
        let d = self.config.dim;
        let sig = self.condition_signals(g, b, t, y)?;
        let h = self.linear_forward(g, b, &self.patch_embed, x)?;
        let pos = g.constant((*self.position).clone());
        let mut h = g.add(h, pos)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let mut s = [sig; 6];
            for (k, slot) in s.iter_mut().enumerate() {
                *slot = g.slice_cols(sig, (6 * i + k) * d, d)?;
            }
            h = self.block_forward(g, b, block, h, &s)?;
        }
        let base = 6 * self.config.depth * d;
        let shift = g.slice_cols(sig, base, d)?;
        let scale = g.slice_cols(sig, base + d, d)?;
        let h = self.modulate(g, h, shift, scale)?;
        self.linear_forward(g, b, &self.final_linear, h)
    }

    fn check_image(&self, x: &Tensor<F>) -> Result<()> {
        if x.shape() != self.config.image_shape() {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                left: x.shape().to_vec(),
                right: self.config.image_shape().to_vec(),
            });
        }
        Ok(())
    }

    /// ε prediction for one `[H × W × C]` image at step `t` under condition `y`.
    pub fn forward(&self, x_t: &Tensor<F>, t: usize, y: usize) -> Result<Tensor<F>> {
        Ok(self.forward_batch(core::slice::from_ref(x_t), &[t], &[y])?.remove(0))
    }

    /// Frozen-parameter forward over several images on one graph.
    pub fn forward_batch(&self, xs: &[Tensor<F>], ts: &[usize], ys: &[usize]) -> Result<Vec<Tensor<F>>> {
        if xs.len() != ts.len() || xs.len() != ys.len() {
            return Err(param_err(
                "forward_batch needs equal numbers of images, steps and labels",
            ));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let c = &self.config;
        xs.iter()
            .zip(ts)
            .zip(ys)
            .map(|((x, &t), &y)| {
                self.check_image(x)?;
                let tokens = g.constant(patchify(x, c.patch)?);
                let out = self.forward_tokens(&mut g, &b, tokens, t, y)?;
                unpatchify(g.value(out), c.patch, c.image_size, c.image_size, c.channels)
            })
            .collect()
    }

    /// Trainable adapter parameters contributed by wrapped layers: `2r(d_out + d_in)` each.
    pub fn adapter_param_count(&self) -> usize {
        self.target_layers()
            .iter()
            .filter_map(|l| l.adapter.map(|a| 2 * a.rank * (l.d_out + l.d_in)))
            .sum()
    }

    /// Structure description stored alongside checkpoints.
    pub fn layout(&self) -> ModelLayout {
        ModelLayout {
            config: self.config.clone(),
            adapter_rank: self.adapter_rank(),
            expanded_rows: self.embeddings.expanded_rows,
        }
    }

    /// Rebuilds the structure described by `layout` with zero-filled parameters.
    pub fn from_layout(layout: &ModelLayout) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut m = Self::new(layout.config.clone(), &mut rng)?;
        // Same order as fine-tuning preparation, so parameter order round-trips.
        if layout.expanded_rows > 0 {
            m.expand_conditions(layout.expanded_rows, &mut rng)?;
        }
        if let Some(r) = layout.adapter_rank {
            m.wrap_modulation(r, &mut rng)?;
        }
        Ok(m)
    }

    /// Overwrites a parameter by name; shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let id = self
            .params
            .find(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter {name}")))?;
        let p = self.params.get_mut(id);
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }
}

/// Identity initialisation: `Γ_out[:, 0] = 1`, `Γ_in[0, :] = 1` (so
/// `Γ_out·Γ_in` is all ones), `B_out = 0` and `B_in` small random.
pub fn init_modulation_identity<F: Scalar, R: Rng>(params: &mut ParamStore<F>, a: &Adapter, rng: &mut R) {
    let r = a.rank;
    {
        let go = params.get_mut(a.gamma_out).value.data_mut();
        go.iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = if i % r == 0 { F::one() } else { F::zero() });
    }
    {
        let gi = &mut params.get_mut(a.gamma_in).value;
        let cols = gi.shape()[1];
        gi.data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = if i < cols { F::one() } else { F::zero() });
    }
    params
        .get_mut(a.b_out)
        .value
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = F::zero());
    let b_in = &mut params.get_mut(a.b_in).value;
    let bound = 1.0 / (b_in.shape()[1] as f64).sqrt();
    b_in.data_mut()
        .iter_mut()
        .for_each(|v| *v = F::of(rng.random_range(-bound..bound)));
}

/// Effective weight `W ⊙ (Γ_out·Γ_in) + B_out·B_in` computed outside a graph.
pub fn modulated_weight<F: Scalar>(
    w: &Tensor<F>,
    gamma_out: &Tensor<F>,
    gamma_in: &Tensor<F>,
    b_out: &Tensor<F>,
    b_in: &Tensor<F>,
) -> Result<Tensor<F>> {
    let gamma = gamma_out.matmul(gamma_in)?;
    let shift = b_out.matmul(b_in)?;
    if gamma.shape() != w.shape() || shift.shape() != w.shape() {
        return Err(Error::ShapeMismatch {
            op: "modulated_weight",
            left: w.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    let data = w
        .data()
        .iter()
        .zip(gamma.data())
        .zip(shift.data())
        .map(|((&w, &g), &s)| w * g + s)
        .collect();
    Tensor::new(w.shape(), data)
}

/// Architecture plus adapter/expansion state; enough to rebuild a model's
/// parameter list before loading values.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelLayout {
    pub config: DiTConfig,
    pub adapter_rank: Option<usize>,
    pub expanded_rows: usize,
}

impl ModelLayout {
    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        for (k, v) in [
            ("image_size", c.image_size),
            ("channels", c.channels),
            ("patch", c.patch),
            ("dim", c.dim),
            ("depth", c.depth),
            ("heads", c.heads),
            ("mlp_ratio", c.mlp_ratio),
            ("num_classes", c.num_classes),
            ("steps", c.steps),
            ("adapter_rank", self.adapter_rank.unwrap_or(0)),
            ("expanded_rows", self.expanded_rows),
        ] {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = DiTConfig::default();
        let mut rank = 0;
        let mut expanded = 0;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("layout line {}: expected key=value", n + 1)))?;
            let v: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Input(format!("layout line {}: bad value {v:?}", n + 1)))?;
            match k.trim() {
                "image_size" => c.image_size = v,
                "channels" => c.channels = v,
                "patch" => c.patch = v,
                "dim" => c.dim = v,
                "depth" => c.depth = v,
                "heads" => c.heads = v,
                "mlp_ratio" => c.mlp_ratio = v,
                "num_classes" => c.num_classes = v,
                "steps" => c.steps = v,
                "adapter_rank" => rank = v,
                "expanded_rows" => expanded = v,
                other => return Err(Error::Input(format!("layout line {}: unknown key {other}", n + 1))),
            }
        }
        c.validate()?;
        Ok(Self {
            config: c,
            adapter_rank: (rank > 0).then_some(rank),
            expanded_rows: expanded,
        })
    }
}
