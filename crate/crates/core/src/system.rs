//! Transversal transition data: one circle diffeomorphism per nerve edge on a common annulus.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::circle::CircleDiffeo;
use crate::cocycle::{Edge, Nerve, UnitaryFlatBundle};
use crate::error::{Error, Result};
use crate::series::LaurentSeries;

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSystem {
    nerve: Nerve,
    maps: Vec<CircleDiffeo>,
    width: f64,
}

impl TransitionSystem {
    /// All maps are regarded on the common width `width`.
    pub fn new(nerve: Nerve, maps: Vec<CircleDiffeo>, width: f64) -> Result<Self> {
        if maps.len() != nerve.edges().len() {
            return Err(Error::InvalidMap(format!(
                "{} transition maps for {} edges",
                maps.len(),
                nerve.edges().len()
            )));
        }
        let maps = maps
            .iter()
            .map(|f| f.with_width(width))
            .collect::<Result<Vec<_>>>()?;
        let system = Self { nerve, maps, width };
        system.bundle()?;
        Ok(system)
    }

    pub fn nerve(&self) -> &Nerve {
        &self.nerve
    }

    pub fn maps(&self) -> &[CircleDiffeo] {
        &self.maps
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn phases(&self) -> Vec<f64> {
        self.maps.iter().map(|f| f.phase()).collect()
    }

    /// The linear part: edge phases as a unitary flat bundle.
    pub fn bundle(&self) -> Result<UnitaryFlatBundle> {
        UnitaryFlatBundle::new(self.nerve.clone(), self.phases())
    }

    /// Certified `max_e ‖f̂_e‖_{σ'}` over all edges.
    pub fn max_hat_majorant(&self, sigma_prime: f64) -> Result<f64> {
        self.maps
            .iter()
            .map(|f| f.hat().majorant_norm(sigma_prime))
            .try_fold(0.0, |acc, v| Ok(f64::max(acc, v?)))
    }

    pub fn is_linear(&self) -> bool {
        self.maps.iter().all(CircleDiffeo::is_rotation)
    }

    pub fn with_width(&self, width: f64) -> Result<Self> {
        Self::new(self.nerve.clone(), self.maps.clone(), width)
    }

    pub(crate) fn from_parts_unchecked(nerve: Nerve, maps: Vec<CircleDiffeo>, width: f64) -> Self {
        Self { nerve, maps, width }
    }
}

#[derive(Serialize, Deserialize)]
struct EdgeRepr {
    from: String,
    to: String,
    label: String,
    phase: f64,
    hat: LaurentSeries,
}

#[derive(Serialize, Deserialize)]
struct SystemRepr {
    sigma: f64,
    charts: Vec<String>,
    edges: Vec<EdgeRepr>,
    #[serde(default)]
    triples: Vec<[String; 3]>,
}

impl Serialize for TransitionSystem {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let charts = self.nerve.charts();
        let edges = self
            .nerve
            .edges()
            .iter()
            .zip(&self.maps)
            .map(|(e, f)| EdgeRepr {
                from: charts[e.from].clone(),
                to: charts[e.to].clone(),
                label: e.label.clone(),
                phase: f.phase(),
                hat: f.hat().clone(),
            })
            .collect();
        let triples = self
            .nerve
            .triples()
            .iter()
            .map(|t| t.map(|i| charts[i].clone()))
            .collect();
        SystemRepr {
            sigma: self.width,
            charts: charts.to_vec(),
            edges,
            triples,
        }
        .serialize(serializer)
    }
}

impl TryFrom<SystemRepr> for TransitionSystem {
    type Error = Error;

    fn try_from(repr: SystemRepr) -> Result<Self> {
        let index = |id: &str| {
            repr.charts
                .iter()
                .position(|c| c == id)
                .ok_or_else(|| Error::InvalidNerve(format!("unknown chart {id:?}")))
        };
        let mut edges = Vec::with_capacity(repr.edges.len());
        let mut maps = Vec::with_capacity(repr.edges.len());
        for e in &repr.edges {
            edges.push(Edge {
                from: index(&e.from)?,
                to: index(&e.to)?,
                label: e.label.clone(),
            });
            maps.push(CircleDiffeo::new(e.phase, e.hat.clone())?);
        }
        let triples = repr
            .triples
            .iter()
            .map(|t| Ok([index(&t[0])?, index(&t[1])?, index(&t[2])?]))
            .collect::<Result<Vec<_>>>()?;
        let nerve = Nerve::new(repr.charts.clone(), edges, triples)?;
        Self::new(nerve, maps, repr.sigma)
    }
}

impl<'de> Deserialize<'de> for TransitionSystem {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = SystemRepr::deserialize(deserializer)?;
        TransitionSystem::try_from(repr).map_err(serde::de::Error::custom)
    }
}
