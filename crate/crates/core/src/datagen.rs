//! Single-zone indoor air simulator.
//!
//! Each pollutant follows the well-mixed mass balance
//! `dC/dt = S(t)/V − λ(t)·(C − C_out)`. Sources and the air-change rate are
//! piecewise constant over a sample period, so each step is integrated
//! exactly: `C ← C_eq + (C − C_eq)·exp(−λ·dt)` with `C_eq = C_out + S/(V·λ)`.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed activity vocabulary produced by the default scenarios.
pub const ACTIVITY_LABELS: [&str; 8] = [
    "frying",
    "toasting",
    "making tea",
    "boiling pasta",
    "cleaning",
    "vacuuming",
    "window open",
    "in bedroom",
];

pub const CSV_HEADER: [&str; 6] = ["timestamp", "temp_c", "rh_pct", "co2_ppm", "pm25_ugm3", "activity"];

const MINUTES_PER_DAY: u32 = 1440;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityEvent {
    pub label: String,
    /// Minutes since trace start.
    pub start: u32,
    /// Minutes.
    pub duration: u32,
    /// µg/min released into the zone.
    pub pm25_emission: f64,
    /// ppm·m³/min released into the zone.
    pub co2_emission: f64,
    /// Multiplies the air-change rate while active (window opening).
    pub ventilation_multiplier: f64,
    /// Minutes between the label appearing and the emissions starting, e.g.
    /// a pan heating up before it smokes.
    #[serde(default)]
    pub emission_delay: u32,
}

impl ActivityEvent {
    fn active_at(&self, minute: u32) -> bool {
        minute >= self.start && minute < self.start + self.duration
    }

    fn emitting_at(&self, minute: u32) -> bool {
        self.active_at(minute) && minute >= self.start + self.emission_delay
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occupancy {
    pub start: u32,
    pub end: u32,
    pub persons: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSd {
    pub temp: f64,
    pub rh: f64,
    pub co2: f64,
    pub pm25: f64,
}

impl NoiseSd {
    pub const OFF: NoiseSd = NoiseSd {
        temp: 0.0,
        rh: 0.0,
        co2: 0.0,
        pm25: 0.0,
    };
}

/// Diurnal temperature and humidity profile. These are context channels and
/// do not feed back into the pollutant balance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Climate {
    pub temp_mean: f64,
    pub temp_amplitude: f64,
    pub rh_mean: f64,
    pub rh_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// m³
    pub room_volume: f64,
    /// Air changes per hour.
    pub ventilation_rate: f64,
    pub outdoor_co2: f64,
    pub outdoor_pm25: f64,
    pub initial_co2: f64,
    pub initial_pm25: f64,
    /// ppm·m³/min exhaled per occupant.
    pub co2_per_person: f64,
    pub occupancy_schedule: Vec<Occupancy>,
    pub activity_events: Vec<ActivityEvent>,
    /// Minutes per step.
    pub sample_period: u32,
    /// Number of steps.
    pub horizon: usize,
    pub noise_sd: NoiseSd,
    pub climate: Climate,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Scenario(m));
        if !(self.room_volume > 0.0) {
            return bad(format!("room_volume must be > 0, got {}", self.room_volume));
        }
        if !(self.ventilation_rate > 0.0) {
            return bad(format!(
                "ventilation_rate must be > 0, got {}",
                self.ventilation_rate
            ));
        }
        if self.sample_period == 0 {
            return bad("sample_period must be > 0".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be > 0".into());
        }
        let noise = [self.noise_sd.temp, self.noise_sd.rh, self.noise_sd.co2, self.noise_sd.pm25];
        if noise.iter().any(|s| !(*s >= 0.0)) {
            return bad("noise standard deviations must be >= 0".into());
        }
        let end = self.horizon as u64 * self.sample_period as u64;
        for ev in &self.activity_events {
            if ev.duration == 0 {
                return bad(format!("event `{}` has zero duration", ev.label));
            }
            if ev.pm25_emission < 0.0 || ev.co2_emission < 0.0 {
                return bad(format!("event `{}` has a negative emission", ev.label));
            }
            if !(ev.ventilation_multiplier > 0.0) {
                return bad(format!(
                    "event `{}` has non-positive ventilation multiplier",
                    ev.label
                ));
            }
            if ev.emission_delay >= ev.duration {
                return bad(format!("event `{}` emission delay exceeds its duration", ev.label));
            }
            if ev.start as u64 >= end {
                return bad(format!("event `{}` starts after the horizon", ev.label));
            }
        }
        for occ in &self.occupancy_schedule {
            if occ.end < occ.start {
                return bad(format!("occupancy interval {}..{} reversed", occ.start, occ.end));
            }
        }
        Ok(())
    }

    pub fn duration_minutes(&self) -> u64 {
        self.horizon as u64 * self.sample_period as u64
    }
}

/// Simulated sensor record, one entry per step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub timestamps: Vec<i64>,
    pub temp: Vec<f64>,
    pub humidity: Vec<f64>,
    pub co2: Vec<f64>,
    pub pm25: Vec<f64>,
    pub activity: Vec<String>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

/// Source and removal rates (per minute, concentration units) at the start
/// of each step, before noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepBudget {
    pub co2_source: f64,
    pub co2_removal: f64,
    pub pm25_source: f64,
    pub pm25_removal: f64,
}

pub fn simulate(s: &Scenario) -> Result<Trace> {
    simulate_with_budget(s).map(|(t, _)| t)
}

/// Runs the scenario and also returns the per-step mass-balance terms.
pub fn simulate_with_budget(s: &Scenario) -> Result<(Trace, Vec<StepBudget>)> {
    s.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let dt = s.sample_period as f64;
    let base_k = s.ventilation_rate / 60.0;

    let mut trace = Trace::default();
    let mut budget = Vec::with_capacity(s.horizon);
    let (mut co2, mut pm) = (s.initial_co2, s.initial_pm25);

    for n in 0..s.horizon {
        let minute = n as u32 * s.sample_period;
        let persons: u32 = s
            .occupancy_schedule
            .iter()
            .filter(|o| minute >= o.start && minute < o.end)
            .map(|o| o.persons)
            .sum();
        let mut co2_src = persons as f64 * s.co2_per_person;
        let mut pm_src = 0.0;
        let mut k = base_k;
        let mut label = String::new();
        for ev in s.activity_events.iter().filter(|e| e.active_at(minute)) {
            if ev.emitting_at(minute) {
                co2_src += ev.co2_emission;
                pm_src += ev.pm25_emission;
            }
            k *= ev.ventilation_multiplier;
            if label.is_empty() {
                label = ev.label.clone();
            }
        }
        let co2_rate = co2_src / s.room_volume;
        let pm_rate = pm_src / s.room_volume;

        budget.push(StepBudget {
            co2_source: co2_rate,
            co2_removal: k * (co2 - s.outdoor_co2),
            pm25_source: pm_rate,
            pm25_removal: k * (pm - s.outdoor_pm25),
        });

        let phase = 2.0 * std::f64::consts::PI * (minute as f64 - 540.0) / MINUTES_PER_DAY as f64;
        let temp = s.climate.temp_mean + s.climate.temp_amplitude * phase.sin();
        let rh = s.climate.rh_mean - s.climate.rh_amplitude * phase.sin();

        trace.timestamps.push(minute as i64);
        trace.temp.push(temp);
        trace.humidity.push(rh);
        trace.co2.push(co2);
        trace.pm25.push(pm);
        trace.activity.push(label);

        let decay = (-k * dt).exp();
        let co2_eq = s.outdoor_co2 + co2_rate / k;
        let pm_eq = s.outdoor_pm25 + pm_rate / k;
        co2 = co2_eq + (co2 - co2_eq) * decay;
        pm = pm_eq + (pm - pm_eq) * decay;
    }

    // Noise last, so the clean dynamics above are independent of it.
    add_noise(&mut trace.temp, s.noise_sd.temp, &mut rng);
    add_noise(&mut trace.humidity, s.noise_sd.rh, &mut rng);
    add_noise(&mut trace.co2, s.noise_sd.co2, &mut rng);
    add_noise(&mut trace.pm25, s.noise_sd.pm25, &mut rng);
    let co2_floor = s.outdoor_co2 - 3.0 * s.noise_sd.co2;
    for c in &mut trace.co2 {
        *c = c.max(co2_floor);
    }
    for p in &mut trace.pm25 {
        *p = p.max(0.0);
    }
    Ok((trace, budget))
}

fn add_noise(channel: &mut [f64], sd: f64, rng: &mut ChaCha8Rng) {
    if sd == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sd).expect("finite sd");
    for x in channel {
        *x += normal.sample(rng);
    }
}

struct ActivityKind {
    label: &'static str,
    pm25: f64,
    co2: f64,
    vent: f64,
    min_dur: u32,
    max_dur: u32,
    delay: u32,
}

const KINDS: [ActivityKind; 8] = [
    ActivityKind { label: "frying", pm25: 40.0, co2: 150.0, vent: 1.0, min_dur: 15, max_dur: 25, delay: 6 },
    ActivityKind { label: "toasting", pm25: 16.0, co2: 0.0, vent: 1.0, min_dur: 5, max_dur: 10, delay: 3 },
    ActivityKind { label: "making tea", pm25: 6.0, co2: 60.0, vent: 1.0, min_dur: 5, max_dur: 8, delay: 3 },
    ActivityKind { label: "boiling pasta", pm25: 9.0, co2: 120.0, vent: 1.0, min_dur: 15, max_dur: 20, delay: 8 },
    ActivityKind { label: "cleaning", pm25: 10.0, co2: 0.0, vent: 1.0, min_dur: 20, max_dur: 30, delay: 2 },
    ActivityKind { label: "vacuuming", pm25: 14.0, co2: 0.0, vent: 1.0, min_dur: 10, max_dur: 20, delay: 1 },
    ActivityKind { label: "window open", pm25: 0.0, co2: 0.0, vent: 4.0, min_dur: 20, max_dur: 40, delay: 0 },
    ActivityKind { label: "in bedroom", pm25: 0.0, co2: 300.0, vent: 1.0, min_dur: 30, max_dur: 60, delay: 0 },
];

fn kind(label: &str) -> &'static ActivityKind {
    KINDS.iter().find(|k| k.label == label).expect("known label")
}

fn make_event(rng: &mut ChaCha8Rng, label: &str, window_start: u32, window_end: u32) -> ActivityEvent {
    let k = kind(label);
    let duration = rng.gen_range(k.min_dur..=k.max_dur);
    let latest = window_end.saturating_sub(duration).max(window_start);
    let start = rng.gen_range(window_start..=latest);
    let jitter = rng.gen_range(0.8..1.2);
    ActivityEvent {
        label: label.to_string(),
        start,
        duration,
        pm25_emission: k.pm25 * jitter,
        co2_emission: k.co2 * jitter,
        ventilation_multiplier: k.vent,
        emission_delay: k.delay,
    }
}

/// One simulated day at 1-minute sampling.
pub fn default_day_scenario(seed: u64) -> Scenario {
    default_scenario(seed, 1)
}

/// `days` consecutive days of household routine: overnight and evening
/// occupancy, mealtime cooking, daytime cleaning and one window opening per
/// day. Event times, kinds and strengths vary from day to day.
pub fn default_scenario(seed: u64, days: u32) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_A1F);
    let mut occupancy = Vec::new();
    let mut events = Vec::new();
    let h = 60;
    for day in 0..days {
        let base = day * MINUTES_PER_DAY;
        let wake = 6 * h + rng.gen_range(0..60);
        let leave = 8 * h + 30 + rng.gen_range(0..60);
        let back = 17 * h + rng.gen_range(0..60);
        let persons = rng.gen_range(1..=2);
        occupancy.push(Occupancy { start: base, end: base + leave, persons });
        occupancy.push(Occupancy { start: base + back, end: base + MINUTES_PER_DAY, persons });
        let home_midday = rng.gen_bool(0.3);
        if home_midday {
            occupancy.push(Occupancy { start: base + leave, end: base + back, persons: 1 });
        }

        // breakfast
        let first = if rng.gen_bool(0.6) { "toasting" } else { "making tea" };
        let e = make_event(&mut rng, first, base + wake, base + wake + 40);
        let mut cursor = e.start + e.duration + 5;
        events.push(e);
        if rng.gen_bool(0.5) {
            let second = if first == "toasting" { "making tea" } else { "toasting" };
            let e = make_event(&mut rng, second, cursor, cursor + 30);
            events.push(e);
        }

        // daytime chores and ventilation
        let chore_lo = base + leave.max(cursor - base) + 10;
        if rng.gen_bool(0.7) {
            let chore = if rng.gen_bool(0.5) { "cleaning" } else { "vacuuming" };
            let e = make_event(&mut rng, chore, chore_lo, base + 11 * h + 30);
            cursor = e.start + e.duration;
            events.push(e);
        } else {
            cursor = chore_lo;
        }
        let e = make_event(&mut rng, "window open", cursor.max(base + 12 * h) + 10, base + 16 * h);
        cursor = e.start + e.duration;
        events.push(e);
        if home_midday || rng.gen_bool(0.3) {
            let lunch = if rng.gen_bool(0.5) { "boiling pasta" } else { "making tea" };
            let e = make_event(&mut rng, lunch, cursor + 10, base + back.max(cursor - base + 40));
            events.push(e);
        }

        // dinner
        let dinner = if rng.gen_bool(0.7) { "frying" } else { "boiling pasta" };
        let e = make_event(&mut rng, dinner, base + back + 20, base + back + 150);
        cursor = e.start + e.duration + 10;
        events.push(e);
        if rng.gen_bool(0.5) {
            let e = make_event(&mut rng, "making tea", cursor + 30, cursor + 120);
            cursor = e.start + e.duration + 10;
            events.push(e);
        }
        let e = make_event(&mut rng, "in bedroom", cursor.max(base + 21 * h), base + 23 * h + 30);
        events.push(e);
    }
    events.sort_by_key(|e| e.start);

    Scenario {
        room_volume: 35.0,
        ventilation_rate: 1.0,
        outdoor_co2: 420.0,
        outdoor_pm25: 3.0,
        initial_co2: 420.0,
        initial_pm25: 3.0,
        co2_per_person: 300.0,
        occupancy_schedule: occupancy,
        activity_events: events,
        sample_period: 1,
        horizon: (days * MINUTES_PER_DAY) as usize,
        noise_sd: NoiseSd {
            temp: 0.05,
            rh: 0.3,
            co2: 5.0,
            pm25: 0.3,
        },
        climate: Climate {
            temp_mean: 21.0,
            temp_amplitude: 2.0,
            rh_mean: 50.0,
            rh_amplitude: 6.0,
        },
        seed,
    }
}

/// Formats a value with at most 12 significant digits, in the shortest
/// form that parses back to the same rounded value.
pub fn format_value(v: f64) -> String {
    let rounded: f64 = format!("{v:.11e}").parse().expect("valid float text");
    format!("{rounded}")
}

pub fn write_csv<W: Write>(trace: &Trace, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(CSV_HEADER)?;
    for i in 0..trace.len() {
        w.write_record([
            trace.timestamps[i].to_string(),
            format_value(trace.temp[i]),
            format_value(trace.humidity[i]),
            format_value(trace.co2[i]),
            format_value(trace.pm25[i]),
            trace.activity[i].clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(())
}

pub fn export_csv(trace: &Trace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(trace, std::io::BufWriter::new(file))
}
