//! Low-rank adapters and per-scalar parameter addressing.
//!
//! An adapter at one `(layer, site)` holds `A: [d_in × r]` and
//! `B: [r × d_out]`; the effective projection is `W + scale·A·B` in the
//! model's `x·W` convention (the usual `W + scale·B·A` when weights are
//! written output-major). All adapter scalars live in one flat vector whose
//! order is the [`ParamAddress`] order: layer, then site, then `A` before
//! `B`, then row-major element index.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::model::{Model, ModelConfig, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    Q,
    K,
    V,
    Gate,
    Up,
    Down,
}

impl Site {
    pub const ALL: [Site; 6] = [Site::Q, Site::K, Site::V, Site::Gate, Site::Up, Site::Down];

    pub fn letter(self) -> char {
        match self {
            Site::Q => 'Q',
            Site::K => 'K',
            Site::V => 'V',
            Site::Gate => 'G',
            Site::Up => 'U',
            Site::Down => 'D',
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Site::Q => "Q",
            Site::K => "K",
            Site::V => "V",
            Site::Gate => "Gate",
            Site::Up => "Up",
            Site::Down => "Down",
        };
        f.write_str(name)
    }
}

/// Non-empty subset of adapter sites, written as letters (`QKV`, `GUD`, `QKVGUD`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SiteSet(u8);

impl SiteSet {
    pub const QKV: SiteSet = SiteSet(0b000111);
    pub const GUD: SiteSet = SiteSet(0b111000);
    pub const QKVGUD: SiteSet = SiteSet(0b111111);

    pub fn new(sites: &[Site]) -> Result<Self, ModelError> {
        let bits = sites.iter().fold(0, |acc, s| acc | s.bit());
        Self::from_bits(bits)
    }

    pub fn from_bits(bits: u8) -> Result<Self, ModelError> {
        if bits == 0 || bits & !0b111111 != 0 {
            return Err(ModelError::Adapter(format!("invalid site mask {bits:#b}")));
        }
        Ok(Self(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, site: Site) -> bool {
        self.0 & site.bit() != 0
    }

    pub fn iter(self) -> impl Iterator<Item = Site> {
        Site::ALL.into_iter().filter(move |s| self.contains(*s))
    }
}

impl fmt::Display for SiteSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in self.iter() {
            write!(f, "{}", s.letter())?;
        }
        Ok(())
    }
}

impl FromStr for SiteSet {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut bits = 0u8;
        for c in s.trim().chars() {
            let site = Site::ALL
                .into_iter()
                .find(|site| site.letter() == c.to_ascii_uppercase())
                .ok_or_else(|| ModelError::Adapter(format!("unknown site letter {c:?} in {s:?}")))?;
            if bits & site.bit() != 0 {
                return Err(ModelError::Adapter(format!("site {site} repeated in {s:?}")));
            }
            bits |= site.bit();
        }
        Self::from_bits(bits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InitMode {
    /// `A` random normal, `B` zero.
    Standard,
    /// Both factors random with a small standard deviation.
    SymmetricSmall,
    /// Factors from the leading singular triplets of the frozen weight; the
    /// base keeps the residual.
    PrincipalSingular,
}

impl InitMode {
    pub fn code(self) -> u8 {
        match self {
            InitMode::Standard => 0,
            InitMode::SymmetricSmall => 1,
            InitMode::PrincipalSingular => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(InitMode::Standard),
            1 => Some(InitMode::SymmetricSmall),
            2 => Some(InitMode::PrincipalSingular),
            _ => None,
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitMode::Standard => "standard",
            InitMode::SymmetricSmall => "symmetric-small",
            InitMode::PrincipalSingular => "principal-singular",
        })
    }
}

impl FromStr for InitMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "standard" => Ok(InitMode::Standard),
            "symmetric-small" => Ok(InitMode::SymmetricSmall),
            "principal-singular" => Ok(InitMode::PrincipalSingular),
            other => Err(ModelError::Adapter(format!("unknown init mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    /// Multiplier on `A·B` (the classic `alpha / r`).
    pub scale: f64,
    pub sites: SiteSet,
    pub init: InitMode,
}

impl LoraConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.rank == 0 {
            return Err(ModelError::Adapter("rank must be >= 1".into()));
        }
        if !self.scale.is_finite() || self.scale < 0.0 {
            return Err(ModelError::Adapter(format!("scale must be finite and >= 0, got {}", self.scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Matrix {
    A,
    B,
}

/// One scalar adapter parameter. The derived ordering is the canonical
/// enumeration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamAddress {
    pub layer: usize,
    pub site: Site,
    pub matrix: Matrix,
    pub flat_index: usize,
}

impl fmt::Display for ParamAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}.{:?}[{}]", self.layer, self.site, self.matrix, self.flat_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterSlot {
    pub layer: usize,
    pub site: Site,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    /// Start of `A` in the flat value vector; `B` follows immediately.
    pub offset: usize,
}

impl AdapterSlot {
    pub fn a_len(&self) -> usize {
        self.d_in * self.rank
    }

    pub fn b_len(&self) -> usize {
        self.rank * self.d_out
    }

    pub fn len(&self) -> usize {
        self.a_len() + self.b_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Adapter scalars for every configured `(layer, site)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    config: LoraConfig,
    slots: Vec<AdapterSlot>,
    values: Vec<f64>,
}

/// Closed-form adapter scalar count for a model/adapter configuration pair.
pub fn adapter_param_count(model: &ModelConfig, lora: &LoraConfig) -> usize {
    let per_layer: usize = lora
        .sites
        .iter()
        .map(|s| {
            let (i, o) = model.site_dims(s);
            lora.rank * (i + o)
        })
        .sum();
    per_layer * model.n_layers
}

impl AdapterSet {
    /// Zero-valued adapters laid out for `model`/`config`.
    pub fn zeros(model: &ModelConfig, config: LoraConfig) -> Self {
        let mut slots = Vec::new();
        let mut offset = 0;
        for layer in 0..model.n_layers {
            for site in config.sites.iter() {
                let (d_in, d_out) = model.site_dims(site);
                let slot = AdapterSlot {
                    layer,
                    site,
                    d_in,
                    d_out,
                    rank: config.rank,
                    offset,
                };
                offset += slot.len();
                slots.push(slot);
            }
        }
        Self {
            config,
            slots,
            values: vec![0.0; offset],
        }
    }

    /// Adapters with explicit values, validated against the layout.
    pub fn from_values(model: &ModelConfig, config: LoraConfig, values: Vec<f64>) -> Result<Self, ModelError> {
        let mut set = Self::zeros(model, config);
        if values.len() != set.values.len() {
            return Err(ModelError::Adapter(format!(
                "expected {} adapter values, got {}",
                set.values.len(),
                values.len()
            )));
        }
        set.values = values;
        Ok(set)
    }

    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn slots(&self) -> &[AdapterSlot] {
        &self.slots
    }

    pub fn slot(&self, layer: usize, site: Site) -> Option<&AdapterSlot> {
        self.slots.iter().find(|s| s.layer == layer && s.site == site)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn a(&self, slot: &AdapterSlot) -> &[f64] {
        &self.values[slot.offset..slot.offset + slot.a_len()]
    }

    pub fn b(&self, slot: &AdapterSlot) -> &[f64] {
        &self.values[slot.offset + slot.a_len()..slot.offset + slot.len()]
    }

    /// Address of the scalar at flat position `index`.
    pub fn address(&self, index: usize) -> Option<ParamAddress> {
        let slot = self
            .slots
            .iter()
            .find(|s| index >= s.offset && index < s.offset + s.len())?;
        let local = index - slot.offset;
        let (matrix, flat_index) = if local < slot.a_len() {
            (Matrix::A, local)
        } else {
            (Matrix::B, local - slot.a_len())
        };
        Some(ParamAddress {
            layer: slot.layer,
            site: slot.site,
            matrix,
            flat_index,
        })
    }

    /// Flat position of `addr`, if it names a scalar of this set.
    pub fn index_of(&self, addr: &ParamAddress) -> Option<usize> {
        let slot = self.slot(addr.layer, addr.site)?;
        match addr.matrix {
            Matrix::A if addr.flat_index < slot.a_len() => Some(slot.offset + addr.flat_index),
            Matrix::B if addr.flat_index < slot.b_len() => {
                Some(slot.offset + slot.a_len() + addr.flat_index)
            }
            _ => None,
        }
    }

    pub fn addresses(&self) -> impl Iterator<Item = ParamAddress> + '_ {
        self.slots.iter().flat_map(|s| {
            let a = (0..s.a_len()).map(move |i| ParamAddress {
                layer: s.layer,
                site: s.site,
                matrix: Matrix::A,
                flat_index: i,
            });
            let b = (0..s.b_len()).map(move |i| ParamAddress {
                layer: s.layer,
                site: s.site,
                matrix: Matrix::B,
                flat_index: i,
            });
            a.chain(b)
        })
    }

    /// `scale·A·B` for one slot, `[d_in × d_out]` row-major.
    pub fn delta(&self, slot: &AdapterSlot) -> Vec<f64> {
        let ab = crate::autodiff::mm(self.a(slot), self.b(slot), slot.d_in, slot.rank, slot.d_out);
        ab.into_iter().map(|v| v * self.config.scale).collect()
    }
}

/// Attaches adapters to `model` and initialises them from `seed`.
///
/// Principal-singular init rewrites the base weight at each site to the
/// residual `W - scale·A·B`, so the adapted model starts where the base was.
pub fn attach_lora(model: &mut Model, config: LoraConfig, seed: u64) -> Result<AdapterSet, ModelError> {
    if model.lora.is_some() {
        return Err(ModelError::DuplicateAttachment);
    }
    config.validate()?;
    let mut set = AdapterSet::zeros(&model.config, config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = set.slots.clone();
    for slot in &slots {
        let span = slot.offset..slot.offset + slot.len();
        let (a, b) = set.values[span].split_at_mut(slot.a_len());
        match config.init {
            InitMode::Standard => {
                let std = 1.0 / (slot.d_in as f64).sqrt();
                a.iter_mut().for_each(|v| *v = std * rng.sample::<f64, _>(StandardNormal));
            }
            InitMode::SymmetricSmall => {
                for v in a.iter_mut().chain(b.iter_mut()) {
                    *v = 0.02 * rng.sample::<f64, _>(StandardNormal);
                }
            }
            InitMode::PrincipalSingular => {
                if config.scale == 0.0 {
                    return Err(ModelError::Adapter("principal-singular init needs scale > 0".into()));
                }
                let w = model.layers[slot.layer].site_mut(slot.site);
                principal_factors(w.data_mut(), slot, config.scale, a, b);
            }
        }
    }
    model.lora = Some(config);
    Ok(set)
}

fn principal_factors(w: &mut [f64], slot: &AdapterSlot, scale: f64, a: &mut [f64], b: &mut [f64]) {
    let (d_in, d_out, r) = (slot.d_in, slot.d_out, slot.rank);
    let svd = DMatrix::from_row_slice(d_in, d_out, w).svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vt");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    for (k, &idx) in order.iter().take(r).enumerate() {
        let root = (svd.singular_values[idx] / scale).sqrt();
        for i in 0..d_in {
            a[i * r + k] = u[(i, idx)] * root;
        }
        for j in 0..d_out {
            b[k * d_out + j] = vt[(idx, j)] * root;
        }
    }
    let ab = crate::autodiff::mm(a, b, d_in, r, d_out);
    for (wv, d) in w.iter_mut().zip(ab) {
        *wv -= scale * d;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn cfg(d_model: usize, d_ff: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model,
            n_heads: 2,
            d_ff,
            vocab_size: 13,
            max_seq_len: 8,
        }
    }

    fn lora(sites: SiteSet, init: InitMode) -> LoraConfig {
        LoraConfig {
            rank: 2,
            scale: 1.0,
            sites,
            init,
        }
    }

    #[test]
    fn qkvgud_counts_match_shape_arithmetic() {
        let mc = ModelConfig {
            n_layers: 1,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 10,
            max_seq_len: 4,
        };
        let lc = LoraConfig {
            rank: 4,
            scale: 1.0,
            sites: SiteSet::QKVGUD,
            init: InitMode::Standard,
        };
        let set = AdapterSet::zeros(&mc, lc);
        assert_eq!(set.len(), 3840);
        let sizes: Vec<usize> = set.slots().iter().map(|s| s.len()).collect();
        assert_eq!(sizes, vec![512, 512, 512, 768, 768, 768]);
        assert_eq!(adapter_param_count(&mc, &lc), 3840);
    }

    #[test]
    fn standard_init_leaves_forward_unchanged() {
        let base = Model::init(cfg(8, 12), 3).unwrap();
        let mut adapted = base.clone();
        let set = attach_lora(&mut adapted, lora(SiteSet::QKVGUD, InitMode::Standard), 9).unwrap();
        assert!(set.slots().iter().all(|s| set.b(s).iter().all(|&v| v == 0.0)));
        assert!(set.values().iter().any(|&v| v != 0.0));
        let toks = [1, 4, 2, 7, 0];
        let a = base.forward(None, &toks).unwrap();
        let b = adapted.forward(Some(&set), &toks).unwrap();
        let max_diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert_eq!(max_diff, 0.0);
    }

    #[test]
    fn zero_scale_leaves_forward_unchanged() {
        let base = Model::init(cfg(8, 12), 3).unwrap();
        let mut adapted = base.clone();
        let mut lc = lora(SiteSet::QKVGUD, InitMode::SymmetricSmall);
        lc.scale = 0.0;
        let set = attach_lora(&mut adapted, lc, 9).unwrap();
        let toks = [3, 3, 5];
        assert_eq!(base.forward(None, &toks).unwrap(), adapted.forward(Some(&set), &toks).unwrap());
    }

    #[test]
    fn nonzero_adapters_change_forward() {
        let base = Model::init(cfg(8, 12), 3).unwrap();
        let mut adapted = base.clone();
        let set = attach_lora(&mut adapted, lora(SiteSet::QKVGUD, InitMode::SymmetricSmall), 9).unwrap();
        let toks = [3, 3, 5];
        assert_ne!(base.forward(None, &toks).unwrap(), adapted.forward(Some(&set), &toks).unwrap());
    }

    #[test]
    fn doubling_both_factors_quadruples_delta() {
        let mut m = Model::init(cfg(8, 12), 3).unwrap();
        let set = attach_lora(&mut m, lora(SiteSet::QKVGUD, InitMode::SymmetricSmall), 1).unwrap();
        let mut doubled = set.clone();
        doubled.values_mut().iter_mut().for_each(|v| *v *= 2.0);
        for slot in set.slots() {
            // Direct triple-loop product as the reference.
            let (a, b) = (set.a(slot), set.b(slot));
            let mut direct = vec![0.0; slot.d_in * slot.d_out];
            for i in 0..slot.d_in {
                for j in 0..slot.d_out {
                    for k in 0..slot.rank {
                        direct[i * slot.d_out + j] += a[i * slot.rank + k] * b[k * slot.d_out + j];
                    }
                }
            }
            for (x, y) in doubled.delta(slot).iter().zip(&direct) {
                assert!((x - 4.0 * y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn qkv_sites_have_no_mlp_addresses() {
        let set = AdapterSet::zeros(&cfg(8, 12), lora(SiteSet::QKV, InitMode::Standard));
        assert!(set
            .addresses()
            .all(|a| matches!(a.site, Site::Q | Site::K | Site::V)));
    }

    #[test]
    fn addresses_biject_onto_flat_indices() {
        for sites in [SiteSet::QKV, SiteSet::GUD, SiteSet::QKVGUD, "KD".parse().unwrap()] {
            let mc = cfg(8, 12);
            let lc = lora(sites, InitMode::Standard);
            let set = AdapterSet::zeros(&mc, lc);
            let addrs: Vec<ParamAddress> = set.addresses().collect();
            assert_eq!(addrs.len(), set.len());
            assert_eq!(addrs.len(), adapter_param_count(&mc, &lc));
            let unique: HashSet<_> = addrs.iter().collect();
            assert_eq!(unique.len(), addrs.len());
            assert!(addrs.windows(2).all(|w| w[0] < w[1]), "enumeration is sorted");
            for (i, addr) in addrs.iter().enumerate() {
                assert_eq!(set.index_of(addr), Some(i));
                assert_eq!(set.address(i), Some(*addr));
            }
            assert_eq!(set.address(set.len()), None);
        }
    }

    #[test]
    fn duplicate_attachment_is_rejected() {
        let mut m = Model::init(cfg(8, 12), 3).unwrap();
        attach_lora(&mut m, lora(SiteSet::QKV, InitMode::Standard), 1).unwrap();
        assert!(matches!(
            attach_lora(&mut m, lora(SiteSet::GUD, InitMode::Standard), 1),
            Err(ModelError::DuplicateAttachment)
        ));
    }

    #[test]
    fn principal_init_preserves_function_and_is_nonzero() {
        let base = Model::init(cfg(8, 12), 3).unwrap();
        let mut adapted = base.clone();
        let mut lc = lora(SiteSet::QKVGUD, InitMode::PrincipalSingular);
        lc.scale = 0.5;
        let set = attach_lora(&mut adapted, lc, 1).unwrap();
        assert!(set.slots().iter().all(|s| set.b(s).iter().any(|&v| v != 0.0)));
        let toks = [1, 2, 3, 4];
        let a = base.forward(None, &toks).unwrap();
        let b = adapted.forward(Some(&set), &toks).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
        // The adapter carries the leading singular direction of the weight.
        let slot = set.slot(0, Site::Q).unwrap();
        let full = DMatrix::from_row_slice(8, 8, base.layers[0].wq.data()).svd(false, false);
        let top = full.singular_values.max();
        let delta = DMatrix::from_row_slice(8, 8, &set.delta(slot)).svd(false, false);
        assert!((delta.singular_values.max() - top).abs() < 1e-9);
    }

    #[test]
    fn site_sets_parse_and_print() {
        assert_eq!("QKV".parse::<SiteSet>().unwrap(), SiteSet::QKV);
        assert_eq!("gud".parse::<SiteSet>().unwrap(), SiteSet::GUD);
        assert_eq!(SiteSet::QKVGUD.to_string(), "QKVGUD");
        assert!("".parse::<SiteSet>().is_err());
        assert!("QQ".parse::<SiteSet>().is_err());
        assert!("QX".parse::<SiteSet>().is_err());
    }
}
