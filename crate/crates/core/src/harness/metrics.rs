use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::env::{Infractions, TerminationEvent};

/// Multiplicative discount per infraction type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfractionFactors {
    pub pedestrian: f64,
    pub vehicle: f64,
    pub red_light: f64,
    pub stop_sign: f64,
}

impl Default for InfractionFactors {
    fn default() -> Self {
        Self { pedestrian: 0.5, vehicle: 0.6, red_light: 0.7, stop_sign: 0.8 }
    }
}

impl InfractionFactors {
    pub fn validate(&self) -> Result<(), String> {
        for (name, f) in
            [("pedestrian", self.pedestrian), ("vehicle", self.vehicle), ("red_light", self.red_light), ("stop_sign", self.stop_sign)]
        {
            if !(f > 0.0 && f <= 1.0) {
                return Err(format!("factor `{name}` must lie in (0, 1], got {f}"));
            }
        }
        Ok(())
    }
}

/// Product of per-type factors raised to the event counts.
pub fn infraction_penalty(events: &Infractions, factors: &InfractionFactors) -> f64 {
    factors.pedestrian.powi(events.collision_pedestrian as i32)
        * factors.vehicle.powi(events.collision_vehicle as i32)
        * factors.red_light.powi(events.red_light as i32)
        * factors.stop_sign.powi(events.stop_sign as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub episode: u64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub route_completion: f64,
    pub event: TerminationEvent,
    pub infractions: Infractions,
    pub steps: u32,
    pub mean_speed: f64,
    /// Meters driven.
    pub distance: f64,
}

impl EpisodeRecord {
    pub fn driving_score(&self, factors: &InfractionFactors) -> f64 {
        self.route_completion * infraction_penalty(&self.infractions, factors)
    }

    pub fn success(&self) -> bool {
        self.event == TerminationEvent::RouteCompleted
    }

    fn per_km(&self, count: u32) -> f64 {
        if self.distance > 0.0 {
            count as f64 / (self.distance / 1000.0)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics; empty input gives zeros.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub episodes: usize,
    #[serde(rename = "return")]
    pub ret: MeanStd,
    pub driving_score: MeanStd,
    pub infraction_penalty: MeanStd,
    pub success_rate: MeanStd,
    pub route_completion: MeanStd,
    pub speed: MeanStd,
    pub collisions_per_km: MeanStd,
    pub red_lights_per_km: MeanStd,
}

impl AggregateMetrics {
    pub fn from_records(records: &[EpisodeRecord], factors: &InfractionFactors) -> Self {
        let col = |f: &dyn Fn(&EpisodeRecord) -> f64| MeanStd::of(&records.iter().map(f).collect::<Vec<_>>());
        Self {
            episodes: records.len(),
            ret: col(&|r| r.ret),
            driving_score: col(&|r| r.driving_score(factors)),
            infraction_penalty: col(&|r| infraction_penalty(&r.infractions, factors)),
            success_rate: col(&|r| if r.success() { 1.0 } else { 0.0 }),
            route_completion: col(&|r| r.route_completion),
            speed: col(&|r| r.mean_speed),
            collisions_per_km: col(&|r| r.per_km(r.infractions.collision_pedestrian + r.infractions.collision_vehicle)),
            red_lights_per_km: col(&|r| r.per_km(r.infractions.red_light)),
        }
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<20} {:>12} {:>12}", "metric", "mean", "std").unwrap();
        let rows = [
            ("return", self.ret),
            ("driving_score", self.driving_score),
            ("infraction_penalty", self.infraction_penalty),
            ("success_rate", self.success_rate),
            ("route_completion", self.route_completion),
            ("speed", self.speed),
            ("collisions_per_km", self.collisions_per_km),
            ("red_lights_per_km", self.red_lights_per_km),
        ];
        for (name, m) in rows {
            writeln!(s, "{name:<20} {:>12.4} {:>12.4}", m.mean, m.std).unwrap();
        }
        write!(s, "episodes: {}", self.episodes).unwrap();
        s
    }
}
