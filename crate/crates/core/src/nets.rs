//! Network architectures.
//!
//! GDN and GSRN share one guided low-rank factorization architecture:
//!
//! * U-branch: two stride-2 convolutions on the HS input (width kept at the
//!   band count), adaptive average pooling to an `r x 1` grid and a softmax
//!   over `r`, giving one probability vector of mixing weights per band;
//! * V-branch: head convolutions embedding HS and PAN inputs, a stack of
//!   HS/PAN fusion (HPF) layers, and a tail convolution to `r` sigmoid
//!   activated base images.
//!
//! The output is the mode-3 product of base images and coefficients, so its
//! spectral unfolding has rank at most `r` for any parameters. GSRN shifts its
//! base images to `sigmoid - 0.5` so the predicted detail map is signed.
//!
//! PRN is a plain stack of convolutions with a linear last layer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Scalar, Tensor, Var};
use crate::cube::{BaseImages, CoeffMatrix, HsiCube, PanImage};
use crate::error::{Error, Result};

fn default_channels() -> usize {
    128
}
fn default_rank_gdn() -> usize {
    3
}
fn default_rank_gsrn() -> usize {
    12
}
fn default_five() -> usize {
    5
}
fn default_kernel() -> usize {
    3
}
fn default_slope() -> f64 {
    0.2
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_rank_gdn")]
    pub rank_gdn: usize,
    #[serde(default = "default_rank_gsrn")]
    pub rank_gsrn: usize,
    #[serde(default = "default_five")]
    pub hpf_layers: usize,
    #[serde(default = "default_five")]
    pub prn_depth: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    /// False swaps the factorized output for a direct band-count tail
    /// convolution (the "without low-rank modeling" ablation).
    #[serde(default = "default_true")]
    pub factorized: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            channels: default_channels(),
            rank_gdn: default_rank_gdn(),
            rank_gsrn: default_rank_gsrn(),
            hpf_layers: default_five(),
            prn_depth: default_five(),
            kernel: default_kernel(),
            leaky_slope: default_slope(),
            factorized: true,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self, bands: usize) -> Result<()> {
        let counts = [
            ("channels", self.channels),
            ("rank_gdn", self.rank_gdn),
            ("rank_gsrn", self.rank_gsrn),
            ("hpf_layers", self.hpf_layers),
            ("prn_depth", self.prn_depth),
            ("kernel", self.kernel),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be >= 1")));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid(format!("kernel must be odd, got {}", self.kernel)));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::invalid(format!("leaky_slope must be in [0, 1), got {}", self.leaky_slope)));
        }
        if self.factorized && (self.rank_gdn >= bands || self.rank_gsrn >= bands) {
            return Err(Error::invalid(format!(
                "ranks ({}, {}) must be below the band count {bands}",
                self.rank_gdn, self.rank_gsrn
            )));
        }
        Ok(())
    }

    /// `(name, [cout, cin, k, k])` for every convolution.
    pub fn conv_shapes(&self, bands: usize) -> Vec<(String, [usize; 4])> {
        let k = self.kernel;
        let c = self.channels;
        let mut out = Vec::new();
        for (net, rank) in [("gdn", self.rank_gdn), ("gsrn", self.rank_gsrn)] {
            if self.factorized {
                out.push((format!("{net}.u.sconv1"), [bands, bands, k, k]));
                out.push((format!("{net}.u.sconv2"), [bands, bands, k, k]));
            }
            out.push((format!("{net}.v.head_hs"), [c, bands, k, k]));
            out.push((format!("{net}.v.head_pan"), [c, 1, k, k]));
            for i in 1..=self.hpf_layers {
                out.push((format!("{net}.v.hpf{i}.a"), [c, 2 * c, k, k]));
                out.push((format!("{net}.v.hpf{i}.b"), [c, 2 * c, k, k]));
            }
            let tail_out = if self.factorized { rank } else { bands };
            out.push((format!("{net}.v.tail"), [tail_out, c, k, k]));
        }
        for i in 1..=self.prn_depth {
            let cin = if i == 1 { bands } else { c };
            let cout = if i == self.prn_depth { 1 } else { c };
            out.push((format!("prn.conv{i}"), [cout, cin, k, k]));
        }
        out
    }
}

/// Named parameters of all three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T = f32> {
    pub arch: ArchConfig,
    pub bands: usize,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelState<T> {
    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            arch: self.arch.clone(),
            bands: self.bands,
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// Registers every parameter in `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Params {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    g.parameter(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Params {
            vars,
            slope: self.arch.leaky_slope,
            factorized: self.arch.factorized,
            rank_gdn: self.arch.rank_gdn,
            rank_gsrn: self.arch.rank_gsrn,
        }
    }
}

/// Fan-in scaled uniform kernels (bound `sqrt(6 / fan_in)`), zero biases.
pub fn init_state(arch: &ArchConfig, bands: usize, seed: u64) -> Result<ModelState> {
    arch.validate(bands)?;
    let mut params = BTreeMap::new();
    for (name, shape) in arch.conv_shapes(bands) {
        params.insert(format!("{name}.weight"), Tensor::zeros(shape.to_vec()));
        params.insert(format!("{name}.bias"), Tensor::zeros(vec![shape[0]]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in params.iter_mut() {
        if name.ends_with(".weight") {
            let fan_in = (t.shape[1] * t.shape[2] * t.shape[3]) as f64;
            let bound = (6.0 / fan_in).sqrt() as f32;
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-bound..=bound));
        }
    }
    Ok(ModelState {
        arch: arch.clone(),
        bands,
        params,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct StateManifest {
    arch: ArchConfig,
    bands: usize,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

impl ModelState<f32> {
    /// Writes `manifest.json` plus one little-endian f32 blob per parameter.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (name, t) in &self.params {
            let file = format!("{name}.f32");
            let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(dir.join(&file), bytes)?;
            entries.push(ParamEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                file,
            });
        }
        let manifest = StateManifest {
            arch: self.arch.clone(),
            bands: self.bands,
            params: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: StateManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let mut params = BTreeMap::new();
        for e in manifest.params {
            let bytes = fs::read(dir.join(&e.file))?;
            let n: usize = e.shape.iter().product();
            if bytes.len() != 4 * n {
                return Err(Error::Format {
                    offset: bytes.len() as u64,
                    message: format!("{}: expected {} bytes, found {}", e.file, 4 * n, bytes.len()),
                });
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(e.name, Tensor::new(e.shape, data));
        }
        let state = ModelState {
            arch: manifest.arch,
            bands: manifest.bands,
            params,
        };
        let expected: Vec<String> = state
            .arch
            .conv_shapes(state.bands)
            .into_iter()
            .flat_map(|(n, _)| [format!("{n}.bias"), format!("{n}.weight")])
            .collect();
        if expected.len() != state.params.len() || expected.iter().any(|n| !state.params.contains_key(n)) {
            return Err(Error::invalid("state parameters do not match the manifest architecture"));
        }
        if !state.is_finite() {
            return Err(Error::invalid("state contains non-finite parameters"));
        }
        Ok(state)
    }
}

/// Graph handles of a bound [`ModelState`].
#[derive(Debug, Clone)]
pub struct Params {
    vars: BTreeMap<String, Var>,
    slope: f64,
    factorized: bool,
    rank_gdn: usize,
    rank_gsrn: usize,
}

impl Params {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    fn conv<T: Scalar>(&self, g: &mut Graph<T>, name: &str, x: Var, stride: usize) -> Var {
        let w = self.var(&format!("{name}.weight"));
        let b = self.var(&format!("{name}.bias"));
        g.conv2d(x, w, b, stride)
    }

    fn conv_act<T: Scalar>(&self, g: &mut Graph<T>, name: &str, x: Var, stride: usize) -> Var {
        let y = self.conv(g, name, x, stride);
        g.leaky_relu(y, T::c(self.slope))
    }
}

/// Graph outputs of one factorization network.
#[derive(Debug, Clone, Copy)]
pub struct FactorVars {
    /// `[bands, h, w]` network output.
    pub out: Var,
    /// `[bands, rank, 1]` coefficients (factorized variant only).
    pub coeffs: Option<Var>,
    /// `[rank, h, w]` base images as fed to the mode-3 product.
    pub bases: Var,
}

/// Two parallel convolutions over the concatenated HS and PAN features.
pub fn hpf_layer_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &Params,
    name: &str,
    hs: Var,
    pan: Var,
) -> (Var, Var) {
    let cat = g.concat(hs, pan);
    let hs_out = p.conv_act(g, &format!("{name}.a"), cat, 1);
    let pan_out = p.conv_act(g, &format!("{name}.b"), cat, 1);
    (hs_out, pan_out)
}

fn factorization_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &Params,
    net: &str,
    hs: Var,
    pan: Var,
    rank: usize,
    signed: bool,
    hpf_layers: usize,
) -> FactorVars {
    let coeffs = p.factorized.then(|| {
        let u = p.conv_act(g, &format!("{net}.u.sconv1"), hs, 2);
        let u = p.conv_act(g, &format!("{net}.u.sconv2"), u, 2);
        let pooled = g.adaptive_avg_pool(u, rank, 1);
        g.softmax_dim1(pooled)
    });
    let mut fh = p.conv_act(g, &format!("{net}.v.head_hs"), hs, 1);
    let mut fp = p.conv_act(g, &format!("{net}.v.head_pan"), pan, 1);
    for i in 1..=hpf_layers {
        (fh, fp) = hpf_layer_graph(g, p, &format!("{net}.v.hpf{i}"), fh, fp);
    }
    let tail = p.conv(g, &format!("{net}.v.tail"), fh, 1);
    let mut bases = g.sigmoid(tail);
    if signed {
        bases = g.add_scalar(bases, T::c(-0.5));
    }
    let out = match coeffs {
        Some(u) => g.mode3(bases, u),
        None => bases,
    };
    FactorVars { out, coeffs, bases }
}

/// GDN on graph nodes `n: [b, h, w]`, `q: [1, h, w]`.
pub fn gdn_graph<T: Scalar>(g: &mut Graph<T>, p: &Params, hpf_layers: usize, n: Var, q: Var) -> FactorVars {
    factorization_graph(g, p, "gdn", n, q, p.rank_gdn, false, hpf_layers)
}

#[derive(Debug, Clone, Copy)]
pub struct GsrnVars {
    /// `up(L, s) + detail`
    pub out: Var,
    pub upsampled: Var,
    pub detail: FactorVars,
}

/// GSRN on graph nodes `low: [b, h, w]`, `pan: [1, s*h, s*w]`.
pub fn gsrn_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &Params,
    hpf_layers: usize,
    low: Var,
    pan: Var,
    s: usize,
) -> GsrnVars {
    let upsampled = g.upsample(low, s);
    let detail = factorization_graph(g, p, "gsrn", upsampled, pan, p.rank_gsrn, true, hpf_layers);
    let out = g.add(upsampled, detail.out);
    GsrnVars {
        out,
        upsampled,
        detail,
    }
}

/// PRN on a `[b, h, w]` node, producing `[1, h, w]`.
pub fn prn_graph<T: Scalar>(g: &mut Graph<T>, p: &Params, depth: usize, cube: Var) -> Var {
    let mut x = cube;
    for i in 1..=depth {
        let name = format!("prn.conv{i}");
        x = if i == depth {
            p.conv(g, &name, x, 1)
        } else {
            p.conv_act(g, &name, x, 1)
        };
    }
    x
}

pub fn cube_tensor<T: Scalar>(cube: &HsiCube) -> Tensor<T> {
    let (h, w, b) = cube.dims();
    Tensor::new(vec![b, h, w], cube.values().iter().map(|&v| T::c(f64::from(v))).collect())
}

pub fn pan_tensor<T: Scalar>(pan: &PanImage) -> Tensor<T> {
    let (h, w) = pan.dims();
    Tensor::new(vec![1, h, w], pan.values().iter().map(|&v| T::c(f64::from(v))).collect())
}

pub fn tensor_cube<T: Scalar>(t: &Tensor<T>) -> Result<HsiCube> {
    let (b, h, w) = t.chw();
    HsiCube::new(h, w, b, t.data.iter().map(|v| v.to_f32().unwrap()).collect())
}

pub fn tensor_pan<T: Scalar>(t: &Tensor<T>) -> Result<PanImage> {
    let (c, h, w) = t.chw();
    if c != 1 {
        return Err(Error::dim(format!("expected one channel, got {c}")));
    }
    PanImage::new(h, w, t.data.iter().map(|v| v.to_f32().unwrap()).collect())
}

fn coeffs_from(t: &Tensor<f32>) -> Result<CoeffMatrix> {
    let (b, r, _) = t.chw();
    CoeffMatrix::new(b, r, t.data.clone())
}

fn check_bands(state: &ModelState, cube: &HsiCube) -> Result<()> {
    if cube.bands() != state.bands {
        return Err(Error::dim(format!(
            "state built for {} bands, input has {}",
            state.bands,
            cube.bands()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GdnOutput {
    pub l_hat: HsiCube,
    /// `None` for the non-factorized ablation.
    pub coeffs: Option<CoeffMatrix>,
    pub bases: BaseImages,
}

/// Denoised low-resolution cube `L = V x3 U` from `N` guided by `Q`.
pub fn gdn_forward(state: &ModelState, n: &HsiCube, q: &PanImage) -> Result<GdnOutput> {
    check_bands(state, n)?;
    if (n.height(), n.width()) != q.dims() {
        return Err(Error::dim(format!(
            "GDN inputs disagree spatially: N {}x{}, Q {}x{}",
            n.height(),
            n.width(),
            q.height(),
            q.width()
        )));
    }
    let mut g = Graph::<f32>::new();
    let p = state.bind(&mut g, false);
    let nv = g.constant(cube_tensor(n));
    let qv = g.constant(pan_tensor(q));
    let out = gdn_graph(&mut g, &p, state.arch.hpf_layers, nv, qv);
    Ok(GdnOutput {
        l_hat: tensor_cube(g.value(out.out))?,
        coeffs: out.coeffs.map(|u| coeffs_from(g.value(u))).transpose()?,
        bases: BaseImages::from_cube(tensor_cube(g.value(out.bases))?),
    })
}

#[derive(Debug, Clone)]
pub struct GsrnOutput {
    pub h_hat: HsiCube,
    /// Predicted detail map `f(up(L), P)`.
    pub detail: HsiCube,
    pub coeffs: Option<CoeffMatrix>,
    /// Shifted base images (`sigmoid - 0.5`).
    pub bases: BaseImages,
}

/// `H = up(L, s) + f(up(L, s), P)`.
pub fn gsrn_forward(state: &ModelState, l_hat: &HsiCube, p: &PanImage, s: usize) -> Result<GsrnOutput> {
    check_bands(state, l_hat)?;
    if s < 2 || p.dims() != (l_hat.height() * s, l_hat.width() * s) {
        return Err(Error::dim(format!(
            "PAN {:?} is not the {}x{} cube scaled by {s}",
            p.dims(),
            l_hat.height(),
            l_hat.width()
        )));
    }
    let mut g = Graph::<f32>::new();
    let params = state.bind(&mut g, false);
    let lv = g.constant(cube_tensor(l_hat));
    let pv = g.constant(pan_tensor(p));
    let out = gsrn_graph(&mut g, &params, state.arch.hpf_layers, lv, pv, s);
    Ok(GsrnOutput {
        h_hat: tensor_cube(g.value(out.out))?,
        detail: tensor_cube(g.value(out.detail.out))?,
        coeffs: out.detail.coeffs.map(|u| coeffs_from(g.value(u))).transpose()?,
        bases: BaseImages::from_cube(tensor_cube(g.value(out.detail.bases))?),
    })
}

/// Reconstructed PAN image from a cube.
pub fn prn_forward(state: &ModelState, cube: &HsiCube) -> Result<PanImage> {
    check_bands(state, cube)?;
    let mut g = Graph::<f32>::new();
    let p = state.bind(&mut g, false);
    let x = g.constant(cube_tensor(cube));
    let out = prn_graph(&mut g, &p, state.arch.prn_depth, x);
    tensor_pan(g.value(out))
}

/// Weights of one HPF layer.
#[derive(Debug, Clone)]
pub struct HpfWeights {
    pub a_weight: Tensor<f32>,
    pub a_bias: Tensor<f32>,
    pub b_weight: Tensor<f32>,
    pub b_bias: Tensor<f32>,
}

impl HpfWeights {
    /// Layer `index` (1-based) of network `net` ("gdn" or "gsrn").
    pub fn from_state(state: &ModelState, net: &str, index: usize) -> Option<Self> {
        let get = |s: &str| state.get(&format!("{net}.v.hpf{index}.{s}")).cloned();
        Some(Self {
            a_weight: get("a.weight")?,
            a_bias: get("a.bias")?,
            b_weight: get("b.weight")?,
            b_bias: get("b.bias")?,
        })
    }

    pub fn swapped(&self) -> Self {
        Self {
            a_weight: self.b_weight.clone(),
            a_bias: self.b_bias.clone(),
            b_weight: self.a_weight.clone(),
            b_bias: self.a_bias.clone(),
        }
    }
}

/// Standalone HPF layer on `[channels, h, w]` feature maps.
pub fn hpf_layer(
    weights: &HpfWeights,
    hs: &Tensor<f32>,
    pan: &Tensor<f32>,
    slope: f32,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if hs.shape != pan.shape || hs.shape.len() != 3 {
        return Err(Error::dim(format!(
            "HPF inputs must share [c, h, w], got {:?} and {:?}",
            hs.shape, pan.shape
        )));
    }
    let c = hs.shape[0];
    if weights.a_weight.shape[1] != 2 * c || weights.b_weight.shape[1] != 2 * c {
        return Err(Error::dim(format!("HPF weights expect {} input channels", weights.a_weight.shape[1])));
    }
    let mut g = Graph::<f32>::new();
    let mut vars = BTreeMap::new();
    for (k, t) in [
        ("hpf.a.weight", &weights.a_weight),
        ("hpf.a.bias", &weights.a_bias),
        ("hpf.b.weight", &weights.b_weight),
        ("hpf.b.bias", &weights.b_bias),
    ] {
        vars.insert(k.to_string(), g.constant(t.clone()));
    }
    let p = Params {
        vars,
        slope: f64::from(slope),
        factorized: true,
        rank_gdn: 1,
        rank_gsrn: 1,
    };
    let h = g.constant(hs.clone());
    let q = g.constant(pan.clone());
    let (a, b) = hpf_layer_graph(&mut g, &p, "hpf", h, q);
    Ok((g.value(a).clone(), g.value(b).clone()))
}
