use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::report::{emit_report, ReportFormat, ReportRow};
use super::{Harness, HarnessError, Task, TrialSpec, TrialTable, DEFAULT_MAX_TICKS, DEFAULT_TRIALS};
use crate::nlu::{desk_corpus, train, HashedNgrams, Intent, NluPipeline, TrainConfig, DEFAULT_THRESHOLD};
use crate::par::Execution;
use crate::perception::{DetectorConfig, Lighting};
use crate::seed;

pub const DEFAULT_PROFILE: &str = "default";

/// Featurizer width, hidden width and threshold of one trained classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NluProfile {
    pub dim: usize,
    pub hidden: usize,
    pub threshold: f64,
}

impl Default for NluProfile {
    fn default() -> Self {
        Self {
            dim: HashedNgrams::default().dim,
            hidden: TrainConfig::default().hidden,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandConfig {
    pub label: String,
    pub text: String,
    #[serde(default)]
    pub expected_intent: Option<Intent>,
    /// Pins the lighting for this command, overriding the table axis.
    #[serde(default)]
    pub lighting: Option<Lighting>,
}

fn one_bright() -> Vec<Lighting> {
    vec![Lighting::Bright]
}

fn one_zero() -> Vec<f64> {
    vec![0.0]
}

fn one_default() -> Vec<String> {
    vec![DEFAULT_PROFILE.to_string()]
}

/// One results table: its commands crossed with every axis value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableConfig {
    pub title: String,
    pub task: Task,
    pub commands: Vec<CommandConfig>,
    #[serde(default = "one_bright")]
    pub lighting: Vec<Lighting>,
    #[serde(default = "one_zero")]
    pub clutter: Vec<f64>,
    #[serde(default = "one_zero")]
    pub wer: Vec<f64>,
    #[serde(default = "one_default")]
    pub detector: Vec<String>,
    #[serde(default = "one_default")]
    pub nlu: Vec<String>,
    #[serde(default)]
    pub trials: Option<u32>,
}

fn default_trials() -> u32 {
    DEFAULT_TRIALS
}

fn default_max_ticks() -> u64 {
    DEFAULT_MAX_TICKS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub name: String,
    pub master_seed: u64,
    #[serde(default = "default_trials")]
    pub trials: u32,
    #[serde(default = "default_max_ticks")]
    pub max_ticks: u64,
    /// Named detector profiles; `default` is the stock detector unless
    /// redefined here.
    #[serde(default)]
    pub detectors: BTreeMap<String, DetectorConfig>,
    #[serde(default)]
    pub nlu_profiles: BTreeMap<String, NluProfile>,
    pub tables: Vec<TableConfig>,
}

/// One planned cell before it runs.
#[derive(Debug, Clone, PartialEq)]
struct Cell {
    table: usize,
    label: String,
    spec: TrialSpec,
    detector: String,
    nlu: String,
}

impl CampaignConfig {
    /// Door, switch and cup tasks with command, lighting, clutter and
    /// detector-profile sweeps.
    pub fn paper_tasks() -> Self {
        Self::from_json(include_str!("../../assets/paper_tasks.campaign")).expect("shipped campaign parses")
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("campaign: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Same campaign with every table at `n` trials per cell.
    pub fn with_trials(mut self, n: u32) -> Self {
        self.trials = n;
        self.tables.iter_mut().for_each(|t| t.trials = None);
        self
    }

    fn detector(&self, name: &str) -> Option<DetectorConfig> {
        self.detectors
            .get(name)
            .copied()
            .or_else(|| (name == DEFAULT_PROFILE).then(DetectorConfig::default))
    }

    fn profile(&self, name: &str) -> Option<NluProfile> {
        self.nlu_profiles
            .get(name)
            .copied()
            .or_else(|| (name == DEFAULT_PROFILE).then(NluProfile::default))
    }

    /// Expands and validates every cell. Nothing runs if any cell is bad.
    fn cells(&self) -> Result<Vec<Cell>, HarnessError> {
        let mut cells = Vec::new();
        for (ti, t) in self.tables.iter().enumerate() {
            let bad = |m: String| HarnessError::Config(format!("table {:?}: {m}", t.title));
            if t.commands.is_empty() {
                return Err(bad("no commands".into()));
            }
            if t.lighting.is_empty()
                || t.clutter.is_empty()
                || t.wer.is_empty()
                || t.detector.is_empty()
                || t.nlu.is_empty()
            {
                return Err(bad("every axis needs at least one value".into()));
            }
            for d in &t.detector {
                self.detector(d)
                    .ok_or_else(|| bad(format!("unknown detector profile {d:?}")))?;
            }
            for n in &t.nlu {
                self.profile(n)
                    .ok_or_else(|| bad(format!("unknown nlu profile {n:?}")))?;
            }
            for c in &t.commands {
                let cell_seed = seed::derive(self.master_seed, &[seed::label(&t.title), seed::label(&c.label)]);
                let lightings = c.lighting.map(|l| vec![l]).unwrap_or_else(|| t.lighting.clone());
                for nlu in &t.nlu {
                    for detector in &t.detector {
                        for &lighting in &lightings {
                            for &clutter_fraction in &t.clutter {
                                for &wer in &t.wer {
                                    let spec = TrialSpec {
                                        task: t.task,
                                        command_text: c.text.clone(),
                                        expected_intent: c.expected_intent,
                                        lighting,
                                        clutter_fraction,
                                        wer,
                                        trials: t.trials.unwrap_or(self.trials),
                                        seed: cell_seed,
                                        max_ticks: self.max_ticks,
                                    };
                                    spec.validate().map_err(|e| bad(format!("command {}: {e}", c.label)))?;
                                    cells.push(Cell {
                                        table: ti,
                                        label: c.label.clone(),
                                        spec,
                                        detector: detector.clone(),
                                        nlu: nlu.clone(),
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

/// Results of one configured table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignTable {
    pub title: String,
    pub task: Task,
    pub cells: Vec<TrialTable>,
}

impl CampaignTable {
    /// Rows showing only the columns that vary in this table.
    pub fn rows(&self) -> Vec<ReportRow> {
        let varies = |f: &dyn Fn(&TrialTable) -> String| {
            let mut v: Vec<String> = self.cells.iter().map(f).collect();
            v.sort();
            v.dedup();
            v.len() > 1
        };
        let lc = varies(&|c| format!("{:?}", c.spec.lighting));
        let bn = varies(&|c| c.spec.clutter_fraction.to_string());
        let wer = varies(&|c| c.spec.wer.to_string());
        let det = varies(&|c| c.detector.clone().unwrap_or_default());
        let nlu = varies(&|c| c.nlu.clone().unwrap_or_default());
        self.cells
            .iter()
            .map(|c| {
                let mut r = c.row();
                r.lighting = r.lighting.filter(|_| lc);
                r.clutter = r.clutter.filter(|_| bn);
                r.wer = r.wer.filter(|_| wer);
                r.detector = r.detector.filter(|_| det);
                r.nlu = r.nlu.filter(|_| nlu);
                r
            })
            .collect()
    }

    pub fn render(&self, format: ReportFormat) -> String {
        emit_report(&self.title, &self.rows(), format)
    }

    /// Counts pooled over all cells.
    pub fn pooled(&self) -> ReportRow {
        let sum = |f: fn(&TrialTable) -> u64| self.cells.iter().map(f).sum();
        ReportRow::new(
            self.title.clone(),
            sum(TrialTable::csr),
            sum(TrialTable::cp),
            sum(TrialTable::n),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub name: String,
    pub master_seed: u64,
    pub tables: Vec<CampaignTable>,
}

fn slug(s: &str) -> String {
    let raw: String = s
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect();
    raw.split('-').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("-")
}

impl CampaignReport {
    pub fn summary(&self, format: ReportFormat) -> String {
        let rows: Vec<ReportRow> = self.tables.iter().map(CampaignTable::pooled).collect();
        emit_report(
            &format!("{} (master seed {})", self.name, self.master_seed),
            &rows,
            format,
        )
    }

    /// Report files by name: one CSV and one markdown file per table plus
    /// the summary.
    pub fn files(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (i, t) in self.tables.iter().enumerate() {
            let stem = format!("{:02}-{}", i + 1, slug(&t.title));
            out.push((format!("{stem}.csv"), t.render(ReportFormat::Csv)));
            out.push((format!("{stem}.md"), t.render(ReportFormat::Markdown)));
        }
        out.push(("summary.csv".into(), self.summary(ReportFormat::Csv)));
        out.push(("summary.md".into(), self.summary(ReportFormat::Markdown)));
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<String>, HarnessError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut names = Vec::new();
        for (name, content) in self.files() {
            std::fs::write(dir.join(&name), content)?;
            names.push(name);
        }
        Ok(names)
    }
}

/// Runs the cross product of every table's axes. Cells run one after
/// another; trials within a cell use `exec`.
///
/// `base` provides the arm, scene and machine settings; its classifier
/// serves the `default` profile unless the campaign redefines it.
pub fn campaign(config: &CampaignConfig, base: &Harness, exec: Execution) -> Result<CampaignReport, HarnessError> {
    let cells = config.cells()?;

    let mut pipelines: BTreeMap<String, Arc<NluPipeline>> = BTreeMap::new();
    for cell in &cells {
        if pipelines.contains_key(&cell.nlu) {
            continue;
        }
        let profile = config.profile(&cell.nlu).expect("validated");
        let pipeline = if cell.nlu == DEFAULT_PROFILE && !config.nlu_profiles.contains_key(DEFAULT_PROFILE) {
            base.nlu.clone()
        } else {
            let featurizer = HashedNgrams { dim: profile.dim };
            let train_config = TrainConfig {
                hidden: profile.hidden,
                ..TrainConfig::default()
            };
            let (model, _) = train(&desk_corpus(), &train_config, &featurizer)?;
            Arc::new(NluPipeline::new(Box::new(featurizer), model, profile.threshold)?)
        };
        pipelines.insert(cell.nlu.clone(), pipeline);
    }

    let mut tables: Vec<CampaignTable> = config
        .tables
        .iter()
        .map(|t| CampaignTable {
            title: t.title.clone(),
            task: t.task,
            cells: Vec::new(),
        })
        .collect();
    for cell in cells {
        let harness = Harness {
            nlu: pipelines[&cell.nlu].clone(),
            detector: config.detector(&cell.detector).expect("validated"),
            ..base.clone()
        };
        let mut table = harness.run_trials(&cell.spec, &cell.label, exec)?;
        table.detector = Some(cell.detector);
        table.nlu = Some(cell.nlu);
        tables[cell.table].cells.push(table);
    }
    Ok(CampaignReport {
        name: config.name.clone(),
        master_seed: config.master_seed,
        tables,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(json: &str) -> CampaignConfig {
        CampaignConfig::from_json(json).unwrap()
    }

    #[test]
    fn axes_cross_into_cells() {
        let c = config(
            r#"{"name": "x", "master_seed": 1, "trials": 3,
                "detectors": {"weak": {"base_confidence": 0.7}},
                "tables": [{"title": "T", "task": "door",
                            "commands": [{"label": "A", "text": "Open the door"}],
                            "lighting": ["bright", "dim"], "detector": ["default", "weak"]}]}"#,
        );
        let cells = c.cells().unwrap();
        assert_eq!(cells.len(), 4);
        assert!(cells.iter().all(|c| c.spec.seed == cells[0].spec.seed));
    }

    #[test]
    fn bad_cells_are_rejected_up_front() {
        let unknown = config(
            r#"{"name": "x", "master_seed": 1,
                "tables": [{"title": "T", "task": "door", "detector": ["nope"],
                            "commands": [{"label": "A", "text": "Open the door"}]}]}"#,
        );
        assert!(unknown.cells().is_err());
        let wer = config(
            r#"{"name": "x", "master_seed": 1,
                "tables": [{"title": "T", "task": "door", "wer": [2.0],
                            "commands": [{"label": "A", "text": "Open the door"}]}]}"#,
        );
        assert!(wer.cells().is_err());
    }

    #[test]
    fn shipped_campaign_expands() {
        let c = CampaignConfig::paper_tasks();
        let cells = c.cells().unwrap();
        let titles: Vec<&str> = c.tables.iter().map(|t| t.title.as_str()).collect();
        assert_eq!(
            titles[..4],
            [
                "Task 1 Door",
                "Task 2 Switch",
                "Task 3 Group Order",
                "Task 3 Group Background Noise"
            ]
        );
        let count = |i| cells.iter().filter(|c| c.table == i).count();
        assert_eq!((count(0), count(1), count(2), count(3)), (3, 8, 4, 8));
        assert!(cells.iter().all(|c| c.spec.trials == 500));
    }

    #[test]
    fn slugs_are_file_safe() {
        assert_eq!(slug("Task 3 Group Background Noise"), "task-3-group-background-noise");
    }
}
