//! Differentiable physics observables built from (pT, η, φ) feature columns.
//!
//! All functions take N×1 tape columns in physical units and use the
//! massless-particle approximation. Square roots clamp negative radicands to
//! zero and have zero gradient there.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dataset::{EventTable, FeatureSchema};
use crate::error::{Error, Result};
use crate::losses::HistogramSpec;

/// Groups the feature columns describing one physics object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    pub pt: String,
    #[serde(default)]
    pub eta: Option<String>,
    pub phi: String,
    /// Subject to zero padding.
    #[serde(default)]
    pub optional: bool,
}

/// [`ObjectSpec`] with feature names resolved to column indices.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedObject {
    pub name: String,
    pub pt: usize,
    pub eta: Option<usize>,
    pub phi: usize,
    pub optional: bool,
}

impl ObjectSpec {
    pub fn resolve(&self, schema: &FeatureSchema) -> Result<ResolvedObject> {
        let idx = |f: &str| {
            schema.index_of(f).ok_or_else(|| {
                Error::Config(format!(
                    "object `{}` references unknown feature `{f}`",
                    self.name
                ))
            })
        };
        let pt = idx(&self.pt)?;
        let phi = idx(&self.phi)?;
        let eta = self.eta.as_deref().map(idx).transpose()?;
        if pt == phi || eta == Some(pt) || eta == Some(phi) {
            return Err(Error::Config(format!(
                "object `{}` uses one column twice",
                self.name
            )));
        }
        Ok(ResolvedObject {
            name: self.name.clone(),
            pt,
            eta,
            phi,
            optional: self.optional,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservableKind {
    InvariantMassPair,
    DeltaR,
    VectorPtSum,
    ScalarPtSum,
    TransverseMass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableSpec {
    pub name: String,
    pub kind: ObservableKind,
    /// Object names; for `transverse_mass` the lepton first, then the MET object.
    pub objects: Vec<String>,
    /// Histogram for the target template; derived from percentiles when absent.
    #[serde(default)]
    pub histogram: Option<HistogramSpec>,
}

/// An observable bound to concrete columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedObservable {
    pub name: String,
    pub kind: ObservableKind,
    pub objects: Vec<ResolvedObject>,
    pub histogram: Option<HistogramSpec>,
}

impl ObservableSpec {
    pub fn resolve(&self, objects: &[ResolvedObject]) -> Result<ResolvedObservable> {
        let found: Vec<ResolvedObject> = self
            .objects
            .iter()
            .map(|n| {
                objects
                    .iter()
                    .find(|o| &o.name == n)
                    .cloned()
                    .ok_or_else(|| {
                        Error::Config(format!("observable `{}`: unknown object `{n}`", self.name))
                    })
            })
            .collect::<Result<_>>()?;
        let k = found.len();
        let arity_ok = match self.kind {
            ObservableKind::InvariantMassPair
            | ObservableKind::DeltaR
            | ObservableKind::TransverseMass => k == 2,
            ObservableKind::VectorPtSum | ObservableKind::ScalarPtSum => k >= 2,
        };
        if !arity_ok {
            return Err(Error::Config(format!(
                "observable `{}` of kind {:?} cannot take {k} objects",
                self.name, self.kind
            )));
        }
        if matches!(
            self.kind,
            ObservableKind::InvariantMassPair | ObservableKind::DeltaR
        ) && found.iter().any(|o| o.eta.is_none())
        {
            return Err(Error::Config(format!(
                "observable `{}` needs η for every object",
                self.name
            )));
        }
        Ok(ResolvedObservable {
            name: self.name.clone(),
            kind: self.kind,
            objects: found,
            histogram: self.histogram,
        })
    }
}

/// `Δφ` wrapped into (−π, π].
fn delta_phi(tape: &mut Tape, phi1: Var, phi2: Var) -> Result<Var> {
    let d = tape.sub(phi1, phi2)?;
    Ok(tape.wrap_angle(d))
}

/// `m = sqrt(2·pt1·pt2·(cosh Δη − cos Δφ))`.
pub fn invariant_mass_pair(
    tape: &mut Tape,
    pt1: Var,
    eta1: Var,
    phi1: Var,
    pt2: Var,
    eta2: Var,
    phi2: Var,
) -> Result<Var> {
    let deta = tape.sub(eta1, eta2)?;
    let ch = tape.cosh(deta);
    let dphi = delta_phi(tape, phi1, phi2)?;
    let c = tape.cos(dphi);
    let ang = tape.sub(ch, c)?;
    let pp = tape.mul(pt1, pt2)?;
    let m2 = tape.mul(pp, ang)?;
    let m2 = tape.scale(m2, 2.0);
    Ok(tape.sqrt(m2))
}

/// `ΔR = sqrt(Δη² + Δφ²)` with the azimuthal difference wrapped first.
pub fn delta_r(tape: &mut Tape, eta1: Var, phi1: Var, eta2: Var, phi2: Var) -> Result<Var> {
    let deta = tape.sub(eta1, eta2)?;
    let dphi = delta_phi(tape, phi1, phi2)?;
    let a = tape.square(deta);
    let b = tape.square(dphi);
    let s = tape.add(a, b)?;
    Ok(tape.sqrt(s))
}

/// Magnitude of the summed transverse momentum vectors of `(pt, φ)` pairs.
pub fn vector_pt_sum(tape: &mut Tape, objects: &[(Var, Var)]) -> Result<Var> {
    if objects.len() < 2 {
        return Err(Error::Config(
            "vector_pt_sum needs at least 2 objects".into(),
        ));
    }
    let mut px: Option<Var> = None;
    let mut py: Option<Var> = None;
    for &(pt, phi) in objects {
        let c = tape.cos(phi);
        let s = tape.sin(phi);
        let x = tape.mul(pt, c)?;
        let y = tape.mul(pt, s)?;
        px = Some(match px {
            Some(acc) => tape.add(acc, x)?,
            None => x,
        });
        py = Some(match py {
            Some(acc) => tape.add(acc, y)?,
            None => y,
        });
    }
    let (px, py) = (px.expect("non-empty"), py.expect("non-empty"));
    let a = tape.square(px);
    let b = tape.square(py);
    let s = tape.add(a, b)?;
    Ok(tape.sqrt(s))
}

pub fn scalar_pt_sum(tape: &mut Tape, pts: &[Var]) -> Result<Var> {
    if pts.len() < 2 {
        return Err(Error::Config(
            "scalar_pt_sum needs at least 2 objects".into(),
        ));
    }
    let mut acc = pts[0];
    for &p in &pts[1..] {
        acc = tape.add(acc, p)?;
    }
    Ok(acc)
}

/// `mT = sqrt(2·pt·met·(1 − cos Δφ))`.
pub fn transverse_mass(tape: &mut Tape, pt: Var, phi: Var, met: Var, phi_met: Var) -> Result<Var> {
    let dphi = delta_phi(tape, phi, phi_met)?;
    let c = tape.cos(dphi);
    let neg = tape.scale(c, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let pm = tape.mul(pt, met)?;
    let m2 = tape.mul(pm, one_minus)?;
    let m2 = tape.scale(m2, 2.0);
    Ok(tape.sqrt(m2))
}

impl ResolvedObservable {
    /// Evaluates the observable on an N×d matrix of physical feature values.
    pub fn evaluate(&self, tape: &mut Tape, phys: Var) -> Result<Var> {
        let col = |tape: &mut Tape, j: usize| tape.column(phys, j);
        let o = &self.objects;
        match self.kind {
            ObservableKind::InvariantMassPair => {
                let (a, b) = (&o[0], &o[1]);
                let v = [
                    col(tape, a.pt)?,
                    col(tape, a.eta.expect("checked at resolve"))?,
                    col(tape, a.phi)?,
                    col(tape, b.pt)?,
                    col(tape, b.eta.expect("checked at resolve"))?,
                    col(tape, b.phi)?,
                ];
                invariant_mass_pair(tape, v[0], v[1], v[2], v[3], v[4], v[5])
            }
            ObservableKind::DeltaR => {
                let (a, b) = (&o[0], &o[1]);
                let e1 = col(tape, a.eta.expect("checked at resolve"))?;
                let p1 = col(tape, a.phi)?;
                let e2 = col(tape, b.eta.expect("checked at resolve"))?;
                let p2 = col(tape, b.phi)?;
                delta_r(tape, e1, p1, e2, p2)
            }
            ObservableKind::VectorPtSum => {
                let pairs = o
                    .iter()
                    .map(|ob| Ok((col(tape, ob.pt)?, col(tape, ob.phi)?)))
                    .collect::<Result<Vec<_>>>()?;
                vector_pt_sum(tape, &pairs)
            }
            ObservableKind::ScalarPtSum => {
                let pts = o
                    .iter()
                    .map(|ob| col(tape, ob.pt))
                    .collect::<Result<Vec<_>>>()?;
                scalar_pt_sum(tape, &pts)
            }
            ObservableKind::TransverseMass => {
                let pt = col(tape, o[0].pt)?;
                let phi = col(tape, o[0].phi)?;
                let met = col(tape, o[1].pt)?;
                let phi_met = col(tape, o[1].phi)?;
                transverse_mass(tape, pt, phi, met, phi_met)
            }
        }
    }

    /// Observable values for every event of a physical-unit table.
    pub fn values(&self, table: &EventTable) -> Result<Vec<f64>> {
        self.values_of(table.values())
    }

    pub fn values_of(&self, phys: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(phys.clone());
        let v = self.evaluate(&mut tape, x)?;
        Ok(tape.value(v).data().to_vec())
    }
}
