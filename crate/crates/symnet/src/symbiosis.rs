//! Construction of the S-Net as a strict view over the M-Net's parameter
//! store. The layer map assigns each S-Net encoder layer to an M-Net
//! encoder layer; embedding, decoder stack, final norms and the output
//! projection are resolved by both views through the same store, so the
//! S-Net owns zero parameters of its own.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encoder_layer_of, init_store, ModelDims, ModelView, SharedStore};
use crate::tensor::Precision;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMapStrategy {
    Bottom,
    Top,
    TopBottom,
    Linear,
}

/// Depths of the paired networks: the M-Net runs `m` encoder layers, the
/// S-Net `o` of them (resolved through the layer map), and both share the
/// same `d` decoder layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbiosisSpec {
    pub m: usize,
    pub o: usize,
    pub d: usize,
    pub strategy: LayerMapStrategy,
}

impl SymbiosisSpec {
    pub fn validate(&self) -> Result<()> {
        if self.o == 0 || self.o >= self.m {
            return Err(Error::Config(format!(
                "symbiosis depths need 0 < o < m, got o = {}, m = {}",
                self.o, self.m
            )));
        }
        if self.d == 0 {
            return Err(Error::Config(
                "symbiosis decoder depth d must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// `idx[i] = j` means S-Net encoder layer `i` runs M-Net layer `j`.
/// Always strictly increasing (relative layer order is preserved).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMap(pub Vec<usize>);

impl LayerMap {
    pub fn indices(&self) -> &[usize] {
        &self.0
    }
}

impl std::fmt::Display for LayerMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}]",
            self.0
                .iter()
                .map(|j| j.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        )
    }
}

/// Builds the S-Net -> M-Net encoder layer assignment for a strategy.
///
/// bottom:     `idx[i] = i`
/// top:        `idx[i] = m - o + i`
/// top_bottom: bottom map for the lower `ceil(o/2)` layers, top map for
///             the rest (an odd layer goes to the bottom portion)
/// linear:     `idx[i] = floor(i * m / o)`
pub fn build_layer_map(strategy: LayerMapStrategy, m: usize, o: usize) -> Result<LayerMap> {
    if o == 0 || o >= m {
        return Err(Error::Config(format!(
            "layer map needs 0 < o < m, got o = {o}, m = {m}"
        )));
    }
    let idx: Vec<usize> = match strategy {
        LayerMapStrategy::Bottom => (0..o).collect(),
        LayerMapStrategy::Top => (0..o).map(|i| m - o + i).collect(),
        LayerMapStrategy::TopBottom => {
            let bottom = o.div_ceil(2);
            (0..o)
                .map(|i| if i < bottom { i } else { m - o + i })
                .collect()
        }
        LayerMapStrategy::Linear => (0..o).map(|i| i * m / o).collect(),
    };
    debug_assert!(idx.windows(2).all(|w| w[0] < w[1]));
    debug_assert!(idx.iter().all(|&j| j < m));
    Ok(LayerMap(idx))
}

/// The paired model: one parameter store, two runnable views.
pub struct SymbiosisModel {
    pub dims: ModelDims,
    pub spec: SymbiosisSpec,
    pub layer_map: LayerMap,
    pub mnet: ModelView,
    pub snet: ModelView,
}

impl SymbiosisModel {
    pub fn store(&self) -> SharedStore {
        self.mnet.store.clone()
    }

    /// Parameter names of the shared partition (resolved by the S-Net).
    pub fn shared_names(&self) -> Vec<String> {
        self.snet.param_names()
    }

    /// True for parameters of the M-Net's individual (unshared) part:
    /// encoder layers outside the layer map.
    pub fn is_individual(&self, name: &str) -> bool {
        match encoder_layer_of(name) {
            Some(j) => !self.layer_map.0.contains(&j),
            None => false,
        }
    }

    /// Deliberately breaks sharing by giving the S-Net view a detached
    /// deep copy of the store. Negative control for `verify_sharing`.
    pub fn with_detached_snet(&self) -> SymbiosisModel {
        let detached = self.mnet.store.borrow().clone_detached().shared();
        let mut snet = self.snet.clone();
        snet.store = detached;
        SymbiosisModel {
            dims: self.dims.clone(),
            spec: self.spec,
            layer_map: self.layer_map.clone(),
            mnet: self.mnet.clone(),
            snet,
        }
    }
}

/// Initializes one parameter store from `seed` and wires both views over
/// it. The S-Net adds no parameters of its own.
pub fn build_symbiosis(
    dims: &ModelDims,
    spec: &SymbiosisSpec,
    seed: u64,
    prec: Precision,
) -> Result<SymbiosisModel> {
    spec.validate()?;
    dims.validate()?;
    let layer_map = build_layer_map(spec.strategy, spec.m, spec.o)?;
    let store = init_store(dims, spec.m, spec.d, seed, prec).shared();
    let mut mnet = ModelView::standalone(dims.clone(), spec.m, spec.d, store.clone());
    mnet.label = "mnet".into();
    let snet = ModelView {
        dims: dims.clone(),
        enc_layers: layer_map.0.clone(),
        dec_layers: (0..spec.d).collect(),
        store,
        label: "snet".into(),
    };
    Ok(SymbiosisModel {
        dims: dims.clone(),
        spec: *spec,
        layer_map,
        mnet,
        snet,
    })
}

// ── Sharing verification ───────────────────────────────────────────────

#[derive(Debug)]
pub struct SharingReport {
    pub checked: usize,
    pub mismatches: Vec<String>,
}

impl SharingReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn into_result(self) -> Result<SharingReport> {
        if self.ok() {
            Ok(self)
        } else {
            Err(Error::Verify(self.mismatches.join("\n")))
        }
    }
}

impl std::fmt::Display for SharingReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.ok() {
            write!(
                f,
                "sharing verified: {} parameters resolve to identical storage",
                self.checked
            )
        } else {
            writeln!(
                f,
                "sharing violated for {} of {} parameters:",
                self.mismatches.len(),
                self.checked
            )?;
            for m in &self.mismatches {
                writeln!(f, "  {m}")?;
            }
            Ok(())
        }
    }
}

/// Asserts storage identity (not value equality) for every shared name,
/// and that a parameter update applied through the M-Net view is observed
/// through the S-Net view.
pub fn verify_sharing(model: &SymbiosisModel) -> SharingReport {
    let mut mismatches = Vec::new();
    let shared = model.shared_names();
    let same_store = Rc::ptr_eq(&model.mnet.store, &model.snet.store);
    for name in &shared {
        let m_store = model.mnet.store.borrow();
        let s_store = model.snet.store.borrow();
        let (mp, sp) = (m_store.try_get(name), s_store.try_get(name));
        match (mp, sp) {
            (Some(mp), Some(sp)) => {
                if !same_store || mp.storage_id != sp.storage_id {
                    mismatches.push(format!(
                        "{name}: storage identity differs (m-net id {}, s-net id {}{})",
                        mp.storage_id,
                        sp.storage_id,
                        if same_store { "" } else { ", distinct stores" }
                    ));
                }
            }
            _ => mismatches.push(format!("{name}: missing from a view's store")),
        }
    }

    // update visibility: an in-place change through the M-Net handle must
    // be seen through the S-Net handle
    if let Some(probe) = shared.first() {
        let original = {
            let store = model.mnet.store.borrow();
            store.get(probe).values[0]
        };
        model.mnet.store.borrow_mut().get_mut(probe).values[0] = original + 1.0;
        let seen = model.snet.store.borrow().get(probe).values[0];
        model.mnet.store.borrow_mut().get_mut(probe).values[0] = original;
        if (seen - (original + 1.0)).abs() > 0.0 {
            mismatches.push(format!(
                "{probe}: update through m-net view not observed by s-net view"
            ));
        }
    }

    SharingReport {
        checked: shared.len(),
        mismatches,
    }
}
