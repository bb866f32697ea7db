//! Line-oriented scenario files: `[section]` headers and `key = value`
//! lines, `#` comments. Unknown sections and keys are errors.
//!
//! ```text
//! [support]
//! c0 = 1.0
//! count = 1000
//! charges = 0,0,0,0 ; 4,0,0,0,pinned
//! [mollifier]
//! epsilon = 0.05
//! [integrator]
//! t_end = 1.0
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use vpcharge::convergence::LadderSpec;
use vpcharge::diagnostics::{DEFAULT_DELTA_LADDER, DEFAULT_GRID_CELLS};
use vpcharge::dynamics::Scheme;
use vpcharge::field::{FieldModel, SummationMethod};
use vpcharge::initial_data::SupportSpec;
use vpcharge::mollifier::MollifierParams;
use vpcharge::{ChargeState, Vec2};

use crate::ParseError;

/// Epsilons of the ladder used when a scenario has no `[ladder]` section.
pub const DEFAULT_LADDER_EPSILONS: [f64; 3] = [0.1, 0.05, 0.025];

const KEYS: &[(&str, &[&str])] = &[
    ("scenario", &["name", "seed"]),
    ("support", &["c0", "beta", "count", "charges"]),
    ("mollifier", &["epsilon"]),
    ("field", &["method", "opening_angle", "blob_width"]),
    ("integrator", &["scheme", "dt", "t_end", "adaptive"]),
    (
        "diagnostics",
        &["cadence", "delta_ladder", "tagged", "grid_cells", "separation_threshold"],
    ),
    ("output", &["directory"]),
    ("ladder", &["epsilons", "betas"]),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChargeSpec {
    pub xi: Vec2,
    pub eta: Vec2,
    pub pinned: bool,
}

impl ChargeSpec {
    pub fn state(&self) -> ChargeState {
        ChargeState {
            xi: self.xi,
            eta: if self.pinned { Vec2::ZERO } else { self.eta },
            pinned: self.pinned,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlobWidth {
    /// Half the mean nearest-neighbour spacing of the initial sample.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    /// `min(1e-3, core-resolving cap)` at the initial state.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderConfig {
    pub epsilons: Vec<f64>,
    /// `None` means `beta_n = 2 epsilon_n`.
    pub betas: Option<Vec<f64>>,
}

impl LadderConfig {
    pub fn spec(&self, seed: u64) -> vpcharge::Result<LadderSpec> {
        match &self.betas {
            Some(b) => LadderSpec::new(self.epsilons.clone(), b.clone(), seed),
            None => LadderSpec::with_doubled_betas(self.epsilons.clone(), seed),
        }
    }
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            epsilons: DEFAULT_LADDER_EPSILONS.to_vec(),
            betas: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub c0: f64,
    pub beta: f64,
    pub count: usize,
    pub charges: Vec<ChargeSpec>,
    pub epsilon: f64,
    pub method: SummationMethod,
    pub blob_width: BlobWidth,
    pub scheme: Scheme,
    pub dt: StepSize,
    pub t_end: f64,
    pub adaptive: Option<f64>,
    pub cadence: f64,
    pub delta_ladder: Vec<f64>,
    pub tagged: Vec<u64>,
    pub grid_cells: usize,
    /// Running charge separation must stay above this, when set.
    pub separation_threshold: Option<f64>,
    pub output_dir: PathBuf,
    pub ladder: Option<LadderConfig>,
}

impl Scenario {
    /// The default single-charge scenario: one resting charge at the
    /// origin, `C0 = 1`, `beta = 0.2`, 1000 particles, `epsilon = 0.05`,
    /// RK4 to `T = 1`.
    pub fn single_charge() -> Self {
        Self {
            name: "single_charge".into(),
            seed: 1,
            c0: 1.0,
            beta: 0.2,
            count: 1000,
            charges: vec![ChargeSpec {
                xi: Vec2::ZERO,
                eta: Vec2::ZERO,
                pinned: false,
            }],
            epsilon: 0.05,
            method: SummationMethod::Direct,
            blob_width: BlobWidth::Auto,
            scheme: Scheme::Rk4,
            dt: StepSize::Fixed(1e-3),
            t_end: 1.0,
            adaptive: None,
            cadence: 0.05,
            delta_ladder: DEFAULT_DELTA_LADDER.to_vec(),
            tagged: (0..10).collect(),
            grid_cells: DEFAULT_GRID_CELLS,
            separation_threshold: None,
            output_dir: PathBuf::from("out"),
            ladder: None,
        }
    }

    /// Two resting charges at `(-2, 0)` and `(2, 0)`, otherwise as
    /// [`Scenario::single_charge`]. The separation threshold is half the
    /// initial distance.
    pub fn two_charges() -> Self {
        let at = |x: f64| ChargeSpec {
            xi: Vec2::new(x, 0.0),
            eta: Vec2::ZERO,
            pinned: false,
        };
        Self {
            name: "two_charges".into(),
            charges: vec![at(-2.0), at(2.0)],
            separation_threshold: Some(2.0),
            ..Self::single_charge()
        }
    }

    pub fn charge_states(&self) -> Vec<ChargeState> {
        self.charges.iter().map(ChargeSpec::state).collect()
    }

    pub fn support(&self) -> vpcharge::Result<SupportSpec> {
        SupportSpec::new(self.c0, self.beta, self.charge_states())
    }

    pub fn mollifier(&self) -> vpcharge::Result<MollifierParams> {
        MollifierParams::new(self.epsilon, self.beta)
    }

    /// Field model once the blob width is known.
    pub fn field_model(&self, blob_width: f64) -> vpcharge::Result<FieldModel> {
        FieldModel::new(self.method, blob_width)
    }

    /// Canonical text form; parsing it gives back an identical scenario.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut line = |s: String| {
            out.push_str(&s);
            out.push('\n');
        };
        line("[scenario]".into());
        line(format!("name = {}", self.name));
        line(format!("seed = {}", self.seed));
        line("[support]".into());
        line(format!("c0 = {:?}", self.c0));
        line(format!("beta = {:?}", self.beta));
        line(format!("count = {}", self.count));
        line(format!("charges = {}", format_charges(&self.charges)));
        line("[mollifier]".into());
        line(format!("epsilon = {:?}", self.epsilon));
        line("[field]".into());
        match self.method {
            SummationMethod::Direct => line("method = direct".into()),
            SummationMethod::Tree { opening_angle } => {
                line("method = tree".into());
                line(format!("opening_angle = {opening_angle:?}"));
            }
        }
        line(match self.blob_width {
            BlobWidth::Auto => "blob_width = auto".into(),
            BlobWidth::Fixed(w) => format!("blob_width = {w:?}"),
        });
        line("[integrator]".into());
        line(format!(
            "scheme = {}",
            match self.scheme {
                Scheme::Rk4 => "rk4",
                Scheme::VelocityVerlet => "velocity_verlet",
            }
        ));
        line(match self.dt {
            StepSize::Auto => "dt = auto".into(),
            StepSize::Fixed(h) => format!("dt = {h:?}"),
        });
        line(format!("t_end = {:?}", self.t_end));
        line(match self.adaptive {
            None => "adaptive = off".into(),
            Some(tol) => format!("adaptive = {tol:?}"),
        });
        line("[diagnostics]".into());
        line(format!("cadence = {:?}", self.cadence));
        line(format!("delta_ladder = {}", format_list(&self.delta_ladder)));
        line(format!(
            "tagged = {}",
            self.tagged.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
        ));
        line(format!("grid_cells = {}", self.grid_cells));
        if let Some(t) = self.separation_threshold {
            line(format!("separation_threshold = {t:?}"));
        }
        line("[output]".into());
        line(format!("directory = {}", self.output_dir.display()));
        if let Some(ladder) = &self.ladder {
            line("[ladder]".into());
            line(format!("epsilons = {}", format_list(&ladder.epsilons)));
            if let Some(b) = &ladder.betas {
                line(format!("betas = {}", format_list(b)));
            }
        }
        out
    }
}

fn format_list(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

fn format_charges(charges: &[ChargeSpec]) -> String {
    charges
        .iter()
        .map(|c| {
            let mut s = format!("{:?},{:?},{:?},{:?}", c.xi.x, c.xi.y, c.eta.x, c.eta.y);
            if c.pinned {
                s.push_str(",pinned");
            }
            s
        })
        .collect::<Vec<_>>()
        .join(" ; ")
}

struct Entries {
    values: BTreeMap<(String, String), (String, usize)>,
}

impl Entries {
    fn get(&self, section: &str, key: &str) -> Option<(&str, usize)> {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .map(|(v, l)| (v.as_str(), *l))
    }

    fn line_of(&self, section: &str, key: &str) -> usize {
        self.get(section, key).map_or(0, |(_, l)| l)
    }

    fn parsed<T>(
        &self,
        section: &str,
        key: &str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<Option<T>, ParseError> {
        match self.get(section, key) {
            None => Ok(None),
            Some((value, line)) => parse(value)
                .map(Some)
                .map_err(|message| ParseError::new(line, format!("{section}.{key}"), message)),
        }
    }

    fn required<T>(&self, section: &str, key: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<T, ParseError> {
        self.parsed(section, key, parse)?
            .ok_or_else(|| ParseError::new(0, format!("{section}.{key}"), "missing required key"))
    }
}

fn real(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("expected a number, got '{s}'"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("expected a finite number, got '{s}'"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v = real(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("must be > 0, got {v}"))
    }
}

fn integer<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("expected a nonnegative integer, got '{s}'"))
}

fn real_list(s: &str) -> Result<Vec<f64>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|t| real(t.trim())).collect()
}

fn charges(s: &str) -> Result<Vec<ChargeSpec>, String> {
    s.split(';')
        .map(|item| {
            let fields: Vec<&str> = item.split(',').map(str::trim).collect();
            let pinned = match fields.len() {
                4 => false,
                5 if fields[4] == "pinned" => true,
                _ => {
                    return Err(format!(
                        "expected 'x1,x2,v1,v2' or 'x1,x2,v1,v2,pinned', got '{}'",
                        item.trim()
                    ))
                }
            };
            let n: Vec<f64> = fields[..4].iter().map(|t| real(t)).collect::<Result<_, _>>()?;
            Ok(ChargeSpec {
                xi: Vec2::new(n[0], n[1]),
                eta: Vec2::new(n[2], n[3]),
                pinned,
            })
        })
        .collect()
}

fn tokenize(text: &str) -> Result<Entries, ParseError> {
    let mut values = BTreeMap::new();
    let mut section: Option<String> = None;
    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|c| c.strip_suffix(']')) {
            let name = name.trim();
            if !KEYS.iter().any(|(s, _)| *s == name) {
                return Err(ParseError::new(line, format!("[{name}]"), "unknown section"));
            }
            section = Some(name.to_string());
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ParseError::new(line, content, "expected 'key = value'"));
        };
        let key = key.trim();
        let Some(current) = &section else {
            return Err(ParseError::new(line, key, "key outside of any [section]"));
        };
        let known = KEYS
            .iter()
            .find(|(s, _)| s == current)
            .is_some_and(|(_, keys)| keys.contains(&key));
        if !known {
            return Err(ParseError::new(line, format!("{current}.{key}"), "unknown key"));
        }
        let slot = (current.clone(), key.to_string());
        if let Some((_, first)) = values.get(&slot) {
            return Err(ParseError::new(
                line,
                format!("{current}.{key}"),
                format!("duplicate key, first set on line {first}"),
            ));
        }
        values.insert(slot, (value.trim().to_string(), line));
    }
    Ok(Entries { values })
}

/// Parses and validates a scenario, filling defaults for absent keys.
/// Required keys: `support.c0`, `support.count`, `mollifier.epsilon`,
/// `integrator.t_end`.
pub fn parse_scenario(text: &str) -> Result<Scenario, ParseError> {
    let e = tokenize(text)?;
    let c0 = e.required("support", "c0", real)?;
    let count: usize = e.required("support", "count", integer)?;
    let epsilon = e.required("mollifier", "epsilon", real)?;
    let t_end = e.required("integrator", "t_end", real)?;

    let name = e.parsed("scenario", "name", |s| Ok(s.to_string()))?.unwrap_or_else(|| "scenario".into());
    if name.is_empty() || name.contains('#') {
        return Err(ParseError::new(e.line_of("scenario", "name"), "scenario.name", "must be a nonempty name"));
    }
    let seed = e.parsed("scenario", "seed", integer)?.unwrap_or(0);
    let beta = e.parsed("support", "beta", real)?.unwrap_or(2.0 * epsilon);
    let charges = e.parsed("support", "charges", charges)?.unwrap_or_else(|| {
        vec![ChargeSpec {
            xi: Vec2::ZERO,
            eta: Vec2::ZERO,
            pinned: false,
        }]
    });

    let method = match e.parsed("field", "method", |s| match s {
        "direct" | "tree" => Ok(s.to_string()),
        _ => Err(format!("expected 'direct' or 'tree', got '{s}'")),
    })? {
        Some(m) if m == "tree" => SummationMethod::Tree {
            opening_angle: e.parsed("field", "opening_angle", real)?.unwrap_or(0.5),
        },
        _ => {
            if e.get("field", "opening_angle").is_some() {
                return Err(ParseError::new(
                    e.line_of("field", "opening_angle"),
                    "field.opening_angle",
                    "only meaningful with method = tree",
                ));
            }
            SummationMethod::Direct
        }
    };
    let blob_width = e
        .parsed("field", "blob_width", |s| match s {
            "auto" => Ok(BlobWidth::Auto),
            _ => real(s).map(BlobWidth::Fixed),
        })?
        .unwrap_or(BlobWidth::Auto);

    let scheme = e
        .parsed("integrator", "scheme", |s| match s {
            "rk4" => Ok(Scheme::Rk4),
            "velocity_verlet" => Ok(Scheme::VelocityVerlet),
            _ => Err(format!("expected 'rk4' or 'velocity_verlet', got '{s}'")),
        })?
        .unwrap_or(Scheme::Rk4);
    let dt = e
        .parsed("integrator", "dt", |s| match s {
            "auto" => Ok(StepSize::Auto),
            _ => positive(s).map(StepSize::Fixed),
        })?
        .unwrap_or(StepSize::Auto);
    let adaptive = e
        .parsed("integrator", "adaptive", |s| match s {
            "off" => Ok(None),
            _ => positive(s).map(Some),
        })?
        .flatten();

    let cadence = e.parsed("diagnostics", "cadence", positive)?.unwrap_or(0.05);
    let delta_ladder = e
        .parsed("diagnostics", "delta_ladder", real_list)?
        .unwrap_or_else(|| DEFAULT_DELTA_LADDER.to_vec());
    let tagged: Vec<u64> = e
        .parsed("diagnostics", "tagged", |s| {
            if s.trim().is_empty() {
                return Ok(Vec::new());
            }
            s.split(',').map(|t| integer(t.trim())).collect()
        })?
        .unwrap_or_else(|| (0..10.min(count as u64)).collect());
    let grid_cells = e.parsed("diagnostics", "grid_cells", integer)?.unwrap_or(DEFAULT_GRID_CELLS);
    let separation_threshold = e.parsed("diagnostics", "separation_threshold", positive)?;
    let output_dir = e
        .parsed("output", "directory", |s| Ok(PathBuf::from(s)))?
        .unwrap_or_else(|| PathBuf::from("out"));

    let ladder = match e.parsed("ladder", "epsilons", real_list)? {
        Some(epsilons) => Some(LadderConfig {
            epsilons,
            betas: e.parsed("ladder", "betas", real_list)?,
        }),
        None if e.get("ladder", "betas").is_some() => {
            return Err(ParseError::new(e.line_of("ladder", "betas"), "ladder.betas", "betas given without epsilons"))
        }
        None => None,
    };

    let scenario = Scenario {
        name,
        seed,
        c0,
        beta,
        count,
        charges,
        epsilon,
        method,
        blob_width,
        scheme,
        dt,
        t_end,
        adaptive,
        cadence,
        delta_ladder,
        tagged,
        grid_cells,
        separation_threshold,
        output_dir,
        ladder,
    };
    validate(&scenario, &e)?;
    Ok(scenario)
}

fn validate(s: &Scenario, e: &Entries) -> Result<(), ParseError> {
    let at = |section: &str, key: &str, message: String| {
        ParseError::new(e.line_of(section, key), format!("{section}.{key}"), message)
    };
    if s.count == 0 {
        return Err(at("support", "count", "must be at least 1".into()));
    }
    if s.charges.is_empty() {
        return Err(at("support", "charges", "at least one charge required".into()));
    }
    s.support().map_err(|err| {
        let key = if err.to_string().contains("d0") { "charges" } else if s.c0 > 0.0 { "beta" } else { "c0" };
        at("support", key, err.to_string())
    })?;
    s.mollifier().map_err(|err| {
        let (section, key) = if e.get("support", "beta").is_some() && err.to_string().contains("beta") {
            ("support", "beta")
        } else {
            ("mollifier", "epsilon")
        };
        at(section, key, err.to_string())
    })?;
    let blob = match s.blob_width {
        BlobWidth::Auto => 0.0,
        BlobWidth::Fixed(w) => w,
    };
    s.field_model(blob).map_err(|err| {
        let key = if matches!(s.method, SummationMethod::Tree { .. }) && e.get("field", "opening_angle").is_some() {
            "opening_angle"
        } else {
            "blob_width"
        };
        at("field", key, err.to_string())
    })?;
    if s.t_end < 0.0 {
        return Err(at("integrator", "t_end", format!("must be >= 0, got {}", s.t_end)));
    }
    if s.adaptive.is_some() && s.scheme != Scheme::Rk4 {
        return Err(at("integrator", "adaptive", "adaptive stepping requires scheme = rk4".into()));
    }
    if let Some(d) = s.delta_ladder.iter().find(|d| **d < 0.0) {
        return Err(at("diagnostics", "delta_ladder", format!("entries must be >= 0, got {d}")));
    }
    if s.grid_cells == 0 {
        return Err(at("diagnostics", "grid_cells", "must be at least 1".into()));
    }
    if let Some(id) = s.tagged.iter().find(|id| **id >= s.count as u64) {
        return Err(at("diagnostics", "tagged", format!("particle id {id} out of range 0..{}", s.count)));
    }
    if s.output_dir.as_os_str().is_empty() {
        return Err(at("output", "directory", "must not be empty".into()));
    }
    if let Some(ladder) = &s.ladder {
        ladder.spec(s.seed).map_err(|err| at("ladder", "epsilons", err.to_string()))?;
    }
    Ok(())
}

/// Writes `text` with every line prefixed by `# `.
pub fn commented(text: &str) -> String {
    let mut out = String::new();
    for line in text.lines() {
        let _ = writeln!(out, "# {line}");
    }
    out
}
