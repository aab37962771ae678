//! Activity-based population synthesis and movement simulation.
//!
//! Produces the demographically tagged mobility trace that the traffic
//! stage attaches demands to. Movement is straight-line on an open plane:
//! agents travel between the locations of their daily plan at their mode
//! speed and wait at locations otherwise. Congestion and public-event
//! injections perturb a seeded, deterministic baseline run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const PEDESTRIAN_SPEED_MPS: f64 = 2.0;
pub const VEHICLE_SPEED_MPS: f64 = 30.0;
const VEHICLE_FRACTION: f64 = 0.4;
const SPEED_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum MobilityError {
    #[error("invalid population config: {0}")]
    InvalidConfig(String),
    #[error("no location of kind {0:?} available for a plan")]
    MissingLocationKind(LocationKind),
    #[error("event window [{0}, {1}] outside trace duration {2}")]
    EventOutsideDuration(f64, f64, f64),
    #[error("agent {0} plan references missing location {1}")]
    MissingLocation(u64, usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed trace file: {0}")]
    Malformed(String),
    #[error("duplicate agent id {id} at time {time}")]
    DuplicateId { id: u64, time: f64 },
    #[error("non-monotone timestep {0} after {1}")]
    NonMonotoneTime(f64, f64),
    #[error("trace invariant violated: {0}")]
    InvariantViolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationKind {
    HomeZone,
    Workplace,
    School,
    Mall,
    Stadium,
    BusStop,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocationSpec {
    pub kind: LocationKind,
    pub position: (f64, f64),
    pub capacity: u32,
    #[serde(default)]
    pub open_close: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemographicGroup {
    pub name: String,
    pub fraction: f64,
    pub employment_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub inhabitant_count: u64,
    pub demographic_groups: Vec<DemographicGroup>,
    /// (household size, probability) pairs.
    pub household_size_distribution: Vec<(u32, f64)>,
    /// Hours of day, 0..24.
    pub work_hours: (f64, f64),
    pub education_hours: (f64, f64),
    pub locations: Vec<LocationSpec>,
    /// Map extent in meters; all locations must fall inside.
    pub map_bounds: (f64, f64),
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TravelMode {
    Pedestrian,
    Vehicle,
}

impl TravelMode {
    pub fn max_speed_mps(self) -> f64 {
        match self {
            TravelMode::Pedestrian => PEDESTRIAN_SPEED_MPS,
            TravelMode::Vehicle => VEHICLE_SPEED_MPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityKind {
    Home,
    Work,
    Education,
    Leisure,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Activity {
    pub kind: ActivityKind,
    /// Index into the config's location list; `None` means the agent's home.
    pub location: Option<usize>,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Agent {
    pub user_id: u64,
    pub demographic_group: String,
    pub home: (f64, f64),
    pub mode: TravelMode,
    pub daily_plan: Vec<Activity>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSample {
    pub time_s: f64,
    pub user_id: u64,
    pub x: f64,
    pub y: f64,
    pub speed: f64,
}

#[derive(Debug, Clone)]
pub struct MobilityTrace {
    pub time_step_s: f64,
    pub duration_s: f64,
    pub samples: Vec<TraceSample>,
    pub agents: Vec<Agent>,
}

impl MobilityTrace {
    pub fn element_count(&self) -> u64 {
        let mut ids: Vec<u64> = self.samples.iter().map(|s| s.user_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len() as u64
    }

    pub fn validate(&self) -> Result<(), MobilityError> {
        let known: std::collections::BTreeSet<u64> =
            self.agents.iter().map(|a| a.user_id).collect();
        let modes: BTreeMap<u64, TravelMode> =
            self.agents.iter().map(|a| (a.user_id, a.mode)).collect();
        let mut last: BTreeMap<u64, (f64, f64, f64)> = BTreeMap::new();
        let mut prev_key = (f64::NEG_INFINITY, 0u64);
        for s in &self.samples {
            let key = (s.time_s, s.user_id);
            if key < prev_key {
                return Err(MobilityError::InvariantViolation(format!(
                    "samples not sorted at time {} id {}",
                    s.time_s, s.user_id
                )));
            }
            if key == prev_key {
                return Err(MobilityError::DuplicateId {
                    id: s.user_id,
                    time: s.time_s,
                });
            }
            prev_key = key;
            if !known.contains(&s.user_id) {
                return Err(MobilityError::InvariantViolation(format!(
                    "sample for unknown agent {}",
                    s.user_id
                )));
            }
            if let Some(&(px, py, pt)) = last.get(&s.user_id) {
                let dt = s.time_s - pt;
                if dt > 0.0 {
                    let dist = ((s.x - px).powi(2) + (s.y - py).powi(2)).sqrt();
                    let vmax = modes[&s.user_id].max_speed_mps();
                    if dist / dt > vmax * (1.0 + SPEED_TOLERANCE) {
                        return Err(MobilityError::InvariantViolation(format!(
                            "agent {} exceeds mode speed: {} m/s",
                            s.user_id,
                            dist / dt
                        )));
                    }
                }
            }
            last.insert(s.user_id, (s.x, s.y, s.time_s));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Congestion,
    PublicEvent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventInjection {
    pub kind: EventKind,
    /// (center x, center y, radius m)
    pub region: (f64, f64, f64),
    /// (start s, end s)
    pub window: (f64, f64),
    /// Congestion: speed divisor. Public event: fraction of agents drawn in.
    pub intensity: f64,
}

impl EventInjection {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (cx, cy, r) = self.region;
        (x - cx).powi(2) + (y - cy).powi(2) <= r * r
    }

    fn active(&self, t: f64) -> bool {
        t >= self.window.0 && t <= self.window.1
    }
}

/// Largest-remainder apportionment of `total` across `weights`.
/// Remainder ties go to the earlier entry.
pub fn apportion(total: u64, weights: &[f64]) -> Vec<u64> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 || weights.is_empty() {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // stable sort keeps declaration order on remainder ties
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap()
    });
    for &i in order.iter().take((total - assigned) as usize) {
        counts[i] += 1;
    }
    counts
}

fn validate_config(config: &PopulationConfig) -> Result<(), MobilityError> {
    let frac_sum: f64 = config.demographic_groups.iter().map(|g| g.fraction).sum();
    if config.inhabitant_count > 0 && (frac_sum - 1.0).abs() > 1e-9 {
        return Err(MobilityError::InvalidConfig(format!(
            "demographic fractions sum to {frac_sum}, expected 1"
        )));
    }
    let hh_sum: f64 = config.household_size_distribution.iter().map(|(_, p)| p).sum();
    if !config.household_size_distribution.is_empty() && (hh_sum - 1.0).abs() > 1e-9 {
        return Err(MobilityError::InvalidConfig(format!(
            "household size probabilities sum to {hh_sum}, expected 1"
        )));
    }
    for g in &config.demographic_groups {
        if !(0.0..=1.0).contains(&g.employment_rate) {
            return Err(MobilityError::InvalidConfig(format!(
                "employment rate {} for group {} out of range",
                g.employment_rate, g.name
            )));
        }
    }
    for window in [config.work_hours, config.education_hours] {
        if window.0 >= window.1 {
            return Err(MobilityError::InvalidConfig(format!(
                "hour window {:?} has start >= end",
                window
            )));
        }
    }
    for (i, loc) in config.locations.iter().enumerate() {
        if loc.capacity == 0 {
            return Err(MobilityError::InvalidConfig(format!(
                "location {i} has zero capacity"
            )));
        }
        let (x, y) = loc.position;
        if x < 0.0 || y < 0.0 || x > config.map_bounds.0 || y > config.map_bounds.1 {
            return Err(MobilityError::InvalidConfig(format!(
                "location {i} at ({x}, {y}) outside map bounds"
            )));
        }
    }
    Ok(())
}

/// Splitmix64, used for per-agent deterministic draws that must not depend
/// on generation order.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

/// Per-agent uniform draw in [0,1), independent of any RNG stream.
fn agent_draw(seed: u64, user_id: u64, salt: u64) -> f64 {
    unit_f64(mix64(seed ^ mix64(user_id.wrapping_add(salt))))
}

fn pick_location(
    config: &PopulationConfig,
    kind: LocationKind,
    draw: f64,
) -> Result<usize, MobilityError> {
    let candidates: Vec<usize> = config
        .locations
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind == kind)
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(MobilityError::MissingLocationKind(kind));
    }
    let total_cap: u64 = candidates
        .iter()
        .map(|&i| config.locations[i].capacity as u64)
        .sum();
    let mut target = draw * total_cap as f64;
    for &i in &candidates {
        target -= config.locations[i].capacity as f64;
        if target < 0.0 {
            return Ok(i);
        }
    }
    Ok(*candidates.last().unwrap())
}

/// Synthesizes the population: exact largest-remainder group counts,
/// household co-located homes, and per-agent daily plans.
pub fn generate_population(config: &PopulationConfig) -> Result<Vec<Agent>, MobilityError> {
    validate_config(config)?;
    if config.inhabitant_count == 0 {
        return Ok(Vec::new());
    }

    let fractions: Vec<f64> = config.demographic_groups.iter().map(|g| g.fraction).collect();
    let group_counts = apportion(config.inhabitant_count, &fractions);

    // Household home assignment: walk agents in id order, opening a new
    // household (new home position) whenever the current one fills up.
    let seed = config.rng_seed;
    let mut agents = Vec::with_capacity(config.inhabitant_count as usize);
    let mut user_id: u64 = 0;
    let mut household_room: u32 = 0;
    let mut home = (0.0, 0.0);
    let has_home_zone = config
        .locations
        .iter()
        .any(|l| l.kind == LocationKind::HomeZone);

    for (gi, group) in config.demographic_groups.iter().enumerate() {
        let count = group_counts[gi];
        let employed = apportion(count, &[group.employment_rate, 1.0 - group.employment_rate])[0];
        let is_student_group = group.name.to_ascii_lowercase().contains("student");

        for j in 0..count {
            if household_room == 0 {
                household_room = sample_household_size(config, seed, user_id);
                home = if has_home_zone {
                    let zone = pick_location(
                        config,
                        LocationKind::HomeZone,
                        agent_draw(seed, user_id, 11),
                    )?;
                    let base = config.locations[zone].position;
                    let jx = (agent_draw(seed, user_id, 12) - 0.5) * 200.0;
                    let jy = (agent_draw(seed, user_id, 13) - 0.5) * 200.0;
                    (
                        (base.0 + jx).clamp(0.0, config.map_bounds.0),
                        (base.1 + jy).clamp(0.0, config.map_bounds.1),
                    )
                } else {
                    (
                        agent_draw(seed, user_id, 14) * config.map_bounds.0,
                        agent_draw(seed, user_id, 15) * config.map_bounds.1,
                    )
                };
            }
            household_room -= 1;

            let mode = if agent_draw(seed, user_id, 21) < VEHICLE_FRACTION {
                TravelMode::Vehicle
            } else {
                TravelMode::Pedestrian
            };

            let mut plan = Vec::new();
            if is_student_group {
                let school =
                    pick_location(config, LocationKind::School, agent_draw(seed, user_id, 22))?;
                plan.push(Activity {
                    kind: ActivityKind::Education,
                    location: Some(school),
                    start_s: config.education_hours.0 * 3600.0,
                    end_s: config.education_hours.1 * 3600.0,
                });
            } else if j < employed {
                let workplace =
                    pick_location(config, LocationKind::Workplace, agent_draw(seed, user_id, 23))?;
                plan.push(Activity {
                    kind: ActivityKind::Work,
                    location: Some(workplace),
                    start_s: config.work_hours.0 * 3600.0,
                    end_s: config.work_hours.1 * 3600.0,
                });
            } else if agent_draw(seed, user_id, 24) < 0.5 {
                // unemployed non-students may spend open hours at a mall
                if let Ok(mall) =
                    pick_location(config, LocationKind::Mall, agent_draw(seed, user_id, 25))
                {
                    let (open, close) = config.locations[mall]
                        .open_close
                        .unwrap_or((10.0, 18.0));
                    plan.push(Activity {
                        kind: ActivityKind::Leisure,
                        location: Some(mall),
                        start_s: open * 3600.0,
                        end_s: close * 3600.0,
                    });
                }
            }
            // bracket the day with home stays
            let first_start = plan.first().map(|a| a.start_s).unwrap_or(86_400.0);
            let last_end = plan.last().map(|a| a.end_s).unwrap_or(0.0);
            let mut full_plan = vec![Activity {
                kind: ActivityKind::Home,
                location: None,
                start_s: 0.0,
                end_s: first_start.min(86_400.0),
            }];
            full_plan.extend(plan);
            if last_end < 86_400.0 {
                full_plan.push(Activity {
                    kind: ActivityKind::Home,
                    location: None,
                    start_s: last_end.max(0.0),
                    end_s: 86_400.0,
                });
            }

            agents.push(Agent {
                user_id,
                demographic_group: group.name.clone(),
                home,
                mode,
                daily_plan: full_plan,
            });
            user_id += 1;
        }
    }
    Ok(agents)
}

fn sample_household_size(config: &PopulationConfig, seed: u64, user_id: u64) -> u32 {
    if config.household_size_distribution.is_empty() {
        return 1;
    }
    let draw = agent_draw(seed, user_id, 10);
    let mut acc = 0.0;
    for &(size, p) in &config.household_size_distribution {
        acc += p;
        if draw < acc {
            return size.max(1);
        }
    }
    config
        .household_size_distribution
        .last()
        .map(|&(s, _)| s.max(1))
        .unwrap_or(1)
}

struct AgentState {
    pos: (f64, f64),
    /// Plan waypoints with departure times, precomputed event-free.
    waypoints: Vec<(f64, (f64, f64))>, // (depart at, target)
}

fn plan_waypoints(agent: &Agent, locations: &[LocationSpec]) -> Result<Vec<(f64, (f64, f64))>, MobilityError> {
    let speed = agent.mode.max_speed_mps();
    let mut waypoints = Vec::new();
    let mut pos = agent.home;
    for act in &agent.daily_plan {
        let target = match act.location {
            None => agent.home,
            Some(i) => locations
                .get(i)
                .ok_or(MobilityError::MissingLocation(agent.user_id, i))?
                .position,
        };
        if target != pos {
            let dist = ((target.0 - pos.0).powi(2) + (target.1 - pos.1).powi(2)).sqrt();
            // leave early enough to arrive at the activity start
            let depart = (act.start_s - dist / speed).max(0.0);
            waypoints.push((depart, target));
            pos = target;
        }
    }
    Ok(waypoints)
}

/// Steps every agent through its daily plan at `time_step_s` resolution,
/// applying event perturbations, and samples (time, id, x, y, speed).
pub fn simulate_mobility(
    agents: &[Agent],
    events: &[EventInjection],
    time_step_s: f64,
    duration_s: f64,
    seed: u64,
    locations: &[LocationSpec],
) -> Result<MobilityTrace, MobilityError> {
    assert!(time_step_s > 0.0, "time_step_s must be positive");
    assert!(duration_s >= time_step_s, "duration shorter than one step");
    for ev in events {
        if ev.window.0 < 0.0 || ev.window.1 > duration_s || ev.window.0 > ev.window.1 {
            return Err(MobilityError::EventOutsideDuration(
                ev.window.0,
                ev.window.1,
                duration_s,
            ));
        }
    }

    let mut sorted_agents: Vec<&Agent> = agents.iter().collect();
    sorted_agents.sort_by_key(|a| a.user_id);

    let mut states: Vec<AgentState> = Vec::with_capacity(sorted_agents.len());
    for agent in &sorted_agents {
        states.push(AgentState {
            pos: agent.home,
            waypoints: plan_waypoints(agent, locations)?,
        });
    }

    let step_count = (duration_s / time_step_s).floor() as u64;
    let mut samples = Vec::with_capacity((step_count as usize + 1) * sorted_agents.len());

    for step in 0..=step_count {
        let t = step as f64 * time_step_s;
        for (agent, state) in sorted_agents.iter().zip(states.iter_mut()) {
            let prev = state.pos;

            // public-event override: selected agents head for the center
            let mut target = None;
            for ev in events {
                if ev.kind == EventKind::PublicEvent
                    && ev.active(t)
                    && agent_draw(seed, agent.user_id, 31) < ev.intensity
                {
                    target = Some((ev.region.0, ev.region.1));
                    break;
                }
            }
            let target = target.unwrap_or_else(|| {
                // last waypoint whose departure time has passed, else hold
                state
                    .waypoints
                    .iter()
                    .rev()
                    .find(|(depart, _)| *depart <= t)
                    .map(|&(_, p)| p)
                    .unwrap_or(state.pos)
            });

            let mut speed = agent.mode.max_speed_mps();
            for ev in events {
                if ev.kind == EventKind::Congestion
                    && ev.active(t)
                    && ev.contains(state.pos.0, state.pos.1)
                {
                    speed /= ev.intensity;
                }
            }

            if step > 0 {
                let dx = target.0 - state.pos.0;
                let dy = target.1 - state.pos.1;
                let dist = (dx * dx + dy * dy).sqrt();
                let reach = speed * time_step_s;
                if dist <= reach {
                    state.pos = target;
                } else {
                    state.pos = (
                        state.pos.0 + dx / dist * reach,
                        state.pos.1 + dy / dist * reach,
                    );
                }
            }

            let moved =
                ((state.pos.0 - prev.0).powi(2) + (state.pos.1 - prev.1).powi(2)).sqrt();
            samples.push(TraceSample {
                time_s: t,
                user_id: agent.user_id,
                x: state.pos.0,
                y: state.pos.1,
                speed: if step == 0 { 0.0 } else { moved / time_step_s },
            });
        }
    }

    let trace = MobilityTrace {
        time_step_s,
        duration_s,
        samples,
        agents: sorted_agents.into_iter().cloned().collect(),
    };
    trace.validate()?;
    Ok(trace)
}

/// Writes the trace in the FCD-style XML layout. Returns the element count
/// (distinct agent ids), which is also stamped on the root element.
pub fn export_trace(trace: &MobilityTrace, path: &Path) -> Result<u64, MobilityError> {
    trace.validate()?;
    let element_count = trace.element_count();
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        "<fcd-export element_count=\"{}\" time_step=\"{:.2}\" duration=\"{:.2}\">",
        element_count, trace.time_step_s, trace.duration_s
    );
    let mut i = 0;
    while i < trace.samples.len() {
        let t = trace.samples[i].time_s;
        let _ = writeln!(out, "  <timestep time=\"{t:.2}\">");
        while i < trace.samples.len() && trace.samples[i].time_s == t {
            let s = &trace.samples[i];
            let _ = writeln!(
                out,
                "    <vehicle id=\"{}\" x=\"{:.6}\" y=\"{:.6}\" speed=\"{:.6}\"/>",
                s.user_id, s.x, s.y, s.speed
            );
            i += 1;
        }
        out.push_str("  </timestep>\n");
    }
    out.push_str("</fcd-export>\n");
    fs::write(path, out)?;
    Ok(element_count)
}

fn attr<'a>(tag: &'a str, name: &str) -> Option<&'a str> {
    let pat = format!("{name}=\"");
    let start = tag.find(&pat)? + pat.len();
    let end = tag[start..].find('"')? + start;
    Some(&tag[start..end])
}

fn num_attr(tag: &str, name: &str) -> Result<f64, MobilityError> {
    attr(tag, name)
        .ok_or_else(|| MobilityError::Malformed(format!("missing attribute {name}")))?
        .parse()
        .map_err(|_| MobilityError::Malformed(format!("non-numeric attribute {name}")))
}

fn id_attr(tag: &str) -> Result<u64, MobilityError> {
    let raw = attr(tag, "id")
        .ok_or_else(|| MobilityError::Malformed("missing id attribute".into()))?;
    // tolerate SUMO-style ids like "veh12"
    let digits: String = raw.chars().filter(|c| c.is_ascii_digit()).collect();
    digits
        .parse()
        .map_err(|_| MobilityError::Malformed(format!("id {raw:?} has no numeric part")))
}

/// Parses an FCD-style XML trace. Agents are reconstructed with empty
/// daily plans; the travel mode is inferred from observed speeds.
pub fn import_trace(path: &Path) -> Result<MobilityTrace, MobilityError> {
    let text = fs::read_to_string(path)?;
    if !text.contains("<fcd-export") {
        return Err(MobilityError::Malformed("missing fcd-export root".into()));
    }
    let root_tag = text
        .split('<')
        .find(|s| s.starts_with("fcd-export"))
        .ok_or_else(|| MobilityError::Malformed("missing fcd-export root".into()))?;
    let time_step_s = num_attr(root_tag, "time_step").unwrap_or(1.0);
    let duration_s = num_attr(root_tag, "duration").unwrap_or(0.0);

    let mut samples = Vec::new();
    let mut current_time = f64::NEG_INFINITY;
    let mut seen_at_step: std::collections::BTreeSet<u64> = Default::default();
    for chunk in text.split('<').skip(1) {
        if chunk.starts_with("timestep") {
            let t = num_attr(chunk, "time")?;
            if t <= current_time {
                return Err(MobilityError::NonMonotoneTime(t, current_time));
            }
            current_time = t;
            seen_at_step.clear();
        } else if chunk.starts_with("vehicle") || chunk.starts_with("person") {
            if current_time == f64::NEG_INFINITY {
                return Err(MobilityError::Malformed(
                    "agent element outside any timestep".into(),
                ));
            }
            let id = id_attr(chunk)?;
            if !seen_at_step.insert(id) {
                return Err(MobilityError::DuplicateId {
                    id,
                    time: current_time,
                });
            }
            samples.push(TraceSample {
                time_s: current_time,
                user_id: id,
                x: num_attr(chunk, "x")?,
                y: num_attr(chunk, "y")?,
                speed: num_attr(chunk, "speed")?,
            });
        }
    }

    samples.sort_by(|a, b| {
        a.time_s
            .partial_cmp(&b.time_s)
            .unwrap()
            .then(a.user_id.cmp(&b.user_id))
    });

    // reconstruct minimal agents: first seen position as home, mode from
    // the fastest observed step
    let mut first_pos: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    let mut top_speed: BTreeMap<u64, f64> = BTreeMap::new();
    let mut last: BTreeMap<u64, (f64, f64, f64)> = BTreeMap::new();
    for s in &samples {
        first_pos.entry(s.user_id).or_insert((s.x, s.y));
        if let Some(&(px, py, pt)) = last.get(&s.user_id) {
            let dt = s.time_s - pt;
            if dt > 0.0 {
                let v = ((s.x - px).powi(2) + (s.y - py).powi(2)).sqrt() / dt;
                let top = top_speed.entry(s.user_id).or_insert(0.0);
                if v > *top {
                    *top = v;
                }
            }
        }
        last.insert(s.user_id, (s.x, s.y, s.time_s));
    }
    let agents = first_pos
        .iter()
        .map(|(&id, &home)| Agent {
            user_id: id,
            demographic_group: String::new(),
            home,
            mode: if top_speed.get(&id).copied().unwrap_or(0.0)
                > PEDESTRIAN_SPEED_MPS * (1.0 + SPEED_TOLERANCE)
            {
                TravelMode::Vehicle
            } else {
                TravelMode::Pedestrian
            },
            daily_plan: Vec::new(),
        })
        .collect();

    let trace = MobilityTrace {
        time_step_s,
        duration_s: if duration_s > 0.0 {
            duration_s
        } else {
            current_time.max(0.0)
        },
        samples,
        agents,
    };
    trace.validate()?;
    Ok(trace)
}

/// Per-agent mean position over the whole trace; used to pick the nearest
/// ingress node downstream.
pub fn mean_positions(trace: &MobilityTrace) -> BTreeMap<u64, (f64, f64)> {
    let mut sums: BTreeMap<u64, (f64, f64, u64)> = BTreeMap::new();
    for s in &trace.samples {
        let e = sums.entry(s.user_id).or_insert((0.0, 0.0, 0));
        e.0 += s.x;
        e.1 += s.y;
        e.2 += 1;
    }
    sums.into_iter()
        .map(|(id, (sx, sy, n))| (id, (sx / n as f64, sy / n as f64)))
        .collect()
}
