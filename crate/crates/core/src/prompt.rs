//! Prompt assembly: the six strategy toggles applied to text and images.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LungLobe, NoduleCandidate, StrategyConfig, StudyBundle, Toggle};
use crate::render::{
    intersect, lung_crop, render_slice, roi_crop, select_slice, CropBox, RenderSpec, Rgba,
    SliceMode, DEFAULT_LOBE_COLORS, DEFAULT_OUTLINE_COLOR, ROI_WINDOW_WIDTH,
};

/// Always appended, whatever the configuration or template overrides.
pub const FINAL_ANSWER_INSTRUCTION: &str =
    "End with exactly one line: FINAL ANSWER: KEEP or FINAL ANSWER: DISCARD";
pub const DEFAULT_WORD_LIMIT: u32 = 50;

const BUILTIN: &[(&str, &str)] = &[
    ("framing_clinical", include_str!("../templates/framing_clinical.txt")),
    ("framing_general", include_str!("../templates/framing_general.txt")),
    ("image_single", include_str!("../templates/image_single.txt")),
    ("image_multi", include_str!("../templates/image_multi.txt")),
    ("description_clinical", include_str!("../templates/description_clinical.txt")),
    ("description_general", include_str!("../templates/description_general.txt")),
    ("color_key", include_str!("../templates/color_key.txt")),
    ("questions_clinical", include_str!("../templates/questions_clinical.txt")),
    ("questions_general", include_str!("../templates/questions_general.txt")),
    ("direct_clinical", include_str!("../templates/direct_clinical.txt")),
    ("direct_general", include_str!("../templates/direct_general.txt")),
    ("think", include_str!("../templates/think.txt")),
    ("word_cap", include_str!("../templates/word_cap.txt")),
];

/// Named text blocks. Built-ins are compiled in; a directory of
/// `<name>.txt` files overrides any subset of them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSet {
    blocks: BTreeMap<String, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        TemplateSet {
            blocks: BUILTIN
                .iter()
                .map(|(k, v)| (k.to_string(), v.trim_end().to_string()))
                .collect(),
        }
    }

    pub fn names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(k, _)| *k)
    }

    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut set = TemplateSet::builtin();
        for name in TemplateSet::names() {
            let path = dir.join(format!("{name}.txt"));
            match std::fs::read_to_string(&path) {
                Ok(text) => {
                    set.blocks.insert(name.to_string(), text.trim_end().to_string());
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> &str {
        self.blocks.get(name).map_or("", String::as_str)
    }

    pub fn fill(&self, name: &str, vars: &[(&str, &str)]) -> String {
        let mut s = self.get(name).to_string();
        for (k, v) in vars {
            s = s.replace(&format!("{{{k}}}"), v);
        }
        s
    }
}

/// Text plus images sent to the model for one candidate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptBundle {
    pub study_id: String,
    pub candidate_id: String,
    pub slice: usize,
    /// PNG payloads; one when single vision input is on.
    pub images: Vec<Vec<u8>>,
    pub text: String,
    pub config: StrategyConfig,
    /// Enabled toggle names, then names of substitutions for disabled ones.
    pub trace: Vec<String>,
}

impl PromptBundle {
    pub fn summary(&self) -> String {
        format!(
            "{}/{} config={} slice={} images={}",
            self.study_id,
            self.candidate_id,
            self.config.label(),
            self.slice,
            self.images.len()
        )
    }
}

fn substitution(t: Toggle) -> Option<&'static str> {
    match t {
        Toggle::SingleVisionInput => Some("multi_vision_input"),
        Toggle::LeaveTimeToThink => Some("word_cap"),
        Toggle::ConcealMedicalIntent => Some("clinical_wording"),
        Toggle::GuidingQuestions => Some("direct_question"),
        Toggle::VisionInstructions | Toggle::HighlightRoi => None,
    }
}

pub fn trace_for(config: &StrategyConfig) -> Vec<String> {
    let mut trace: Vec<String> = Toggle::ALL
        .into_iter()
        .filter(|t| config.is_enabled(*t))
        .map(|t| t.name().to_string())
        .collect();
    trace.extend(
        config
            .disabled()
            .into_iter()
            .filter_map(substitution)
            .map(str::to_string),
    );
    trace
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptBuilder {
    pub templates: TemplateSet,
    pub lobe_colors: [Rgba; 5],
    pub outline_color: Rgba,
    /// Human names of the five lobe colors and the outline color.
    pub color_names: [String; 6],
    pub output_dims: [u32; 2],
    pub slice_mode: SliceMode,
    pub word_limit: u32,
}

impl Default for PromptBuilder {
    fn default() -> Self {
        PromptBuilder {
            templates: TemplateSet::builtin(),
            lobe_colors: DEFAULT_LOBE_COLORS,
            outline_color: DEFAULT_OUTLINE_COLOR,
            color_names: ["orange", "sky blue", "bluish green", "yellow", "blue", "vermillion"]
                .map(String::from),
            output_dims: [256, 256],
            slice_mode: SliceMode::Centroid,
            word_limit: DEFAULT_WORD_LIMIT,
        }
    }
}

impl PromptBuilder {
    fn color_key(&self, conceal: bool) -> String {
        let mut lines: Vec<String> = LungLobe::ALL
            .iter()
            .enumerate()
            .map(|(k, lobe)| {
                let name = if conceal {
                    lobe.name().replace(" lobe", " region")
                } else {
                    lobe.name().to_string()
                };
                format!("- {} = {}", self.color_names[k], name)
            })
            .collect();
        let outlined = if conceal { "the marked area" } else { "candidate nodule outline" };
        lines.push(format!("- {} = {}", self.color_names[5], outlined));
        lines.join("\n")
    }

    /// Render specs for the configured image set, in order.
    pub fn render_specs(
        &self,
        study: &StudyBundle,
        candidate: &NoduleCandidate,
        config: &StrategyConfig,
    ) -> Result<Vec<RenderSpec>> {
        let dims = study.volume.dims();
        let slice = select_slice(candidate, &study.lobes, self.slice_mode, config.rng_seed)?;
        let mut base = RenderSpec::new(slice);
        base.lobe_colors = self.lobe_colors;
        base.outline_color = self.outline_color;
        base.output_dims = self.output_dims;
        base.include_color_legend = config.vision_instructions;
        let full = CropBox {
            x0: 0,
            y0: 0,
            x1: dims[0],
            y1: dims[1],
        };
        let mut crop = full;
        if config.highlight_roi {
            crop = roi_crop(candidate, dims, 24);
            base.window_width = ROI_WINDOW_WIDTH;
        }
        if config.conceal_medical_intent {
            // Chest wall and everything outside the lungs is dropped.
            if let Some(lung) = lung_crop(&study.lobes, slice, 2) {
                crop = intersect(crop, lung).unwrap_or(crop);
            }
            base.suppress_exterior = true;
        }
        base.crop = (crop != full).then_some(crop);
        if config.single_vision_input {
            Ok(vec![base])
        } else {
            let mut nodule = base.clone();
            nodule.show_lobes = false;
            let mut lobe = base;
            lobe.show_outline = false;
            Ok(vec![nodule, lobe])
        }
    }

    pub fn text(&self, description: &str, config: &StrategyConfig) -> String {
        let t = &self.templates;
        let general = config.conceal_medical_intent;
        let pick = |clinical: &'static str, generic: &'static str| if general { generic } else { clinical };
        let mut blocks = vec![
            t.get(pick("framing_clinical", "framing_general")).to_string(),
            t.get(if config.single_vision_input { "image_single" } else { "image_multi" })
                .to_string(),
            t.fill(
                pick("description_clinical", "description_general"),
                &[("description", description)],
            ),
        ];
        if config.vision_instructions {
            blocks.push(t.fill("color_key", &[("color_key", &self.color_key(general))]));
        }
        blocks.push(if config.guiding_questions {
            t.get(pick("questions_clinical", "questions_general")).to_string()
        } else {
            t.get(pick("direct_clinical", "direct_general")).to_string()
        });
        blocks.push(if config.leave_time_to_think {
            t.get("think").to_string()
        } else {
            t.fill("word_cap", &[("word_limit", &self.word_limit.to_string())])
        });
        blocks.push(FINAL_ANSWER_INSTRUCTION.to_string());
        blocks.retain(|b| !b.is_empty());
        let mut text = blocks.join("\n\n");
        text.push('\n');
        text
    }

    pub fn build(
        &self,
        study: &StudyBundle,
        candidate: &NoduleCandidate,
        config: &StrategyConfig,
    ) -> Result<PromptBundle> {
        let description = study
            .description
            .as_deref()
            .filter(|d| !d.trim().is_empty())
            .ok_or(Error::MissingField("description"))?;
        let specs = self.render_specs(study, candidate, config)?;
        let images = specs
            .iter()
            .map(|s| render_slice(&study.volume, &study.lobes, candidate, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(PromptBundle {
            study_id: study.study_id.clone(),
            candidate_id: candidate.id.clone(),
            slice: specs[0].slice,
            images,
            text: self.text(description, config),
            config: *config,
            trace: trace_for(config),
        })
    }
}

pub fn build_prompt(
    study: &StudyBundle,
    candidate: &NoduleCandidate,
    config: &StrategyConfig,
) -> Result<PromptBundle> {
    PromptBuilder::default().build(study, candidate, config)
}

/// Leave-one-out columns in table order, then the all-on column.
pub fn ablation_configs() -> Vec<StrategyConfig> {
    let order = [
        Toggle::HighlightRoi,
        Toggle::VisionInstructions,
        Toggle::GuidingQuestions,
        Toggle::ConcealMedicalIntent,
        Toggle::LeaveTimeToThink,
        Toggle::SingleVisionInput,
    ];
    let mut out: Vec<StrategyConfig> = order
        .into_iter()
        .map(|t| StrategyConfig::all_on(0).without(t))
        .collect();
    out.push(StrategyConfig::all_on(0));
    out
}
