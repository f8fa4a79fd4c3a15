//! Conversation records, the instruction template tables and the builder
//! that turns a targets store into an instruction-tuning set.
//!
//! The first human turn carries exactly one `[image]` placeholder marking
//! where the projected fMRI tokens are spliced in.

use std::fs;
use std::path::Path;

use log::warn;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::TargetsStore;
use crate::error::{ensure, Error, Result};
use crate::seed::rng_for;

pub const PLACEHOLDER: &str = "[image]";
const LOCALIZATION_PREFIX: &str = "Locating the concept of \"";

pub const BRIEF_TEMPLATES: [&str; 14] = [
    "Describe the image concisely.",
    "Provide a brief description of the given image.",
    "Offer a succinct explanation of the picture presented.",
    "Summarize the visual content of the image.",
    "Provide a brief description of the image.",
    "Describe the image briefly.",
    "Summarize the image.",
    "Give a short and clear explanation of the subsequent image.",
    "Share a concise interpretation of the image provided.",
    "Present a compact description of the photo's key features.",
    "Relay a brief, clear account of the picture shown.",
    "Render a clear and concise summary of the photo.",
    "Write a terse but informative summary of the picture.",
    "Create a compact narrative representing the image presented.",
];

pub const DETAILED_TEMPLATES: [&str; 20] = [
    "Describe the following image in detail.",
    "Provide a detailed description of the given image.",
    "Give an elaborate explanation of the image you see.",
    "Share a comprehensive rundown of the presented image.",
    "Offer a detailed description of the image.",
    "Describe the image in detail.",
    "Offer a thorough analysis of the image.",
    "Provide a detailed explanation of the subsequent image.",
    "Explain the various aspects of the image before you.",
    "Clarify the contents of the displayed image with great detail.",
    "Characterize the image using a well-detailed description.",
    "Break down the elements of the image in a detailed manner.",
    "Walk through the important details of the image.",
    "Portray the image with a rich, descriptive narrative.",
    "Narrate the contents of the image with precision.",
    "Analyze the image in a comprehensive and detailed manner.",
    "Illustrate the image through a descriptive explanation.",
    "Explain the image in detail.",
    "Examine the image closely and share its details.",
    "Write an exhaustive depiction of the given image.",
];

pub const RECON_TEMPLATES: [&str; 1] =
    ["Provide the corresponding Stable Diffusion prompts for the image."];

pub const LOCALIZATION_TEMPLATES: [&str; 1] = ["Locating the concept of \"<object>\""];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Human,
    Bot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Brief,
    Detailed,
    Dialogue,
    Reasoning,
    ReconPrompt,
    ConceptLoc,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Brief => "brief",
            TaskKind::Detailed => "detailed",
            TaskKind::Dialogue => "dialogue",
            TaskKind::Reasoning => "reasoning",
            TaskKind::ReconPrompt => "recon_prompt",
            TaskKind::ConceptLoc => "concept_loc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "brief" => TaskKind::Brief,
            "detailed" => TaskKind::Detailed,
            "dialogue" => TaskKind::Dialogue,
            "reasoning" => TaskKind::Reasoning,
            "recon_prompt" => TaskKind::ReconPrompt,
            "concept_loc" => TaskKind::ConceptLoc,
            other => return Err(Error::Invalid(format!("unknown task kind {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub stimulus_id: String,
    pub task_kind: TaskKind,
    pub turns: Vec<Turn>,
}

impl ConversationRecord {
    /// One question/answer pair with the placeholder ahead of the instruction.
    pub fn single(
        stimulus_id: impl Into<String>,
        task_kind: TaskKind,
        instruction: &str,
        answer: &str,
    ) -> Self {
        ConversationRecord {
            stimulus_id: stimulus_id.into(),
            task_kind,
            turns: vec![
                Turn {
                    role: Role::Human,
                    text: format!("{PLACEHOLDER} {instruction}"),
                },
                Turn {
                    role: Role::Bot,
                    text: answer.to_string(),
                },
            ],
        }
    }

    /// Byte offset of `[image]` within the first human turn.
    pub fn placeholder(&self) -> Result<usize> {
        self.validate()?;
        Ok(self.turns[0].text.find(PLACEHOLDER).expect("validated"))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.turns.len() >= 2 && self.turns.len() % 2 == 0,
            Error::Invalid(format!(
                "conversation for {} needs whole human/bot pairs, has {} turns",
                self.stimulus_id,
                self.turns.len()
            ))
        );
        for (i, t) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::Human } else { Role::Bot };
            ensure!(
                t.role == expected,
                Error::Invalid(format!("turn {i} should be {expected:?}"))
            );
        }
        let total: usize = self
            .turns
            .iter()
            .map(|t| t.text.matches(PLACEHOLDER).count())
            .sum();
        ensure!(
            total == 1 && self.turns[0].text.contains(PLACEHOLDER),
            Error::Invalid(format!(
                "expected exactly one {PLACEHOLDER} in the first human turn, found {total} overall"
            ))
        );
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let record: ConversationRecord = serde_json::from_str(&text)?;
        record.validate()?;
        Ok(record)
    }
}

/// `Locating the concept of "<object>"` with `"` and `\` escaped.
pub fn localization_instruction(object: &str) -> String {
    let mut out = String::from(LOCALIZATION_PREFIX);
    for c in object.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

/// Inverse of [`localization_instruction`]. Trailing whitespace or a final
/// period after the closing quote is tolerated.
pub fn parse_localization(instruction: &str) -> Option<String> {
    let rest = instruction.trim_start().strip_prefix(LOCALIZATION_PREFIX)?;
    let mut out = String::new();
    let mut chars = rest.char_indices();
    while let Some((i, c)) = chars.next() {
        match c {
            '\\' => out.push(chars.next()?.1),
            '"' => {
                let tail = rest[i + 1..].trim();
                return (tail.is_empty() || tail == "." || tail == ",").then_some(out);
            }
            _ => out.push(c),
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructionTemplates {
    pub brief: Vec<String>,
    pub detailed: Vec<String>,
    pub recon: Vec<String>,
    pub localization: Vec<String>,
}

impl Default for InstructionTemplates {
    fn default() -> Self {
        let v = |t: &[&str]| t.iter().map(|s| s.to_string()).collect();
        InstructionTemplates {
            brief: v(&BRIEF_TEMPLATES),
            detailed: v(&DETAILED_TEMPLATES),
            recon: v(&RECON_TEMPLATES),
            localization: v(&LOCALIZATION_TEMPLATES),
        }
    }
}

impl InstructionTemplates {
    pub fn for_kind(&self, kind: TaskKind) -> Option<&[String]> {
        match kind {
            TaskKind::Brief => Some(&self.brief),
            TaskKind::Detailed => Some(&self.detailed),
            TaskKind::ReconPrompt => Some(&self.recon),
            TaskKind::ConceptLoc => Some(&self.localization),
            TaskKind::Dialogue | TaskKind::Reasoning => None,
        }
    }

    /// Every shipped instruction string.
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.brief
            .iter()
            .chain(&self.detailed)
            .chain(&self.recon)
            .chain(&self.localization)
    }
}

/// Fills a localization template: `"<object>"` becomes the escaped quoted
/// object, a bare `<object>` is replaced verbatim.
fn fill_localization(template: &str, object: &str) -> String {
    let quoted = "\"<object>\"";
    if let Some(pos) = template.find(quoted) {
        let filled = localization_instruction(object);
        let inner = &filled[LOCALIZATION_PREFIX.len() - 1..];
        format!("{}{}{}", &template[..pos], inner, &template[pos + quoted.len()..])
    } else {
        template.replace("<object>", object)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructionSet {
    pub records: Vec<ConversationRecord>,
    /// Stimuli skipped for lacking captions.
    pub skipped: usize,
}

/// One record per requested task kind per stimulus, with the template drawn
/// from a stream seeded by `(seed, stimulus index, kind)`. Dialogue and
/// reasoning records are taken from conversation files already in the store.
pub fn build_instruction_dataset(
    store: &TargetsStore,
    stimulus_ids: &[String],
    templates: &InstructionTemplates,
    kinds: &[TaskKind],
    seed: u64,
) -> Result<InstructionSet> {
    for &k in kinds {
        if let Some(list) = templates.for_kind(k) {
            ensure!(
                !list.is_empty(),
                Error::Invalid(format!("no templates for task kind {}", k.name()))
            );
        }
    }
    let mut records = Vec::new();
    let mut skipped = 0;
    for (si, id) in stimulus_ids.iter().enumerate() {
        let t = store.read(id)?;
        let (Some(brief), Some(detailed)) = (t.brief_caption(), t.detailed_caption()) else {
            skipped += 1;
            continue;
        };
        for &kind in kinds {
            let mut r = rng_for(seed, &[si as u64, kind as u64]);
            let mut pick = |list: &[String]| list[r.random_range(0..list.len())].clone();
            match kind {
                TaskKind::Brief => {
                    records.push(ConversationRecord::single(id, kind, &pick(&templates.brief), brief))
                }
                TaskKind::Detailed => records.push(ConversationRecord::single(
                    id,
                    kind,
                    &pick(&templates.detailed),
                    detailed,
                )),
                TaskKind::ReconPrompt => records.push(ConversationRecord::single(
                    id,
                    kind,
                    &pick(&templates.recon),
                    detailed,
                )),
                TaskKind::ConceptLoc => {
                    if t.objects.is_empty() {
                        continue;
                    }
                    let template = pick(&templates.localization);
                    let object = &t.objects[r.random_range(0..t.objects.len())];
                    records.push(ConversationRecord::single(
                        id,
                        kind,
                        &fill_localization(&template, object),
                        object,
                    ));
                }
                TaskKind::Dialogue | TaskKind::Reasoning => {
                    for conv in &t.conversations {
                        let rec = store.read_conversation(id, conv)?;
                        if rec.task_kind == kind {
                            records.push(rec);
                        }
                    }
                }
            }
        }
    }
    if skipped > 0 {
        warn!("{skipped} stimuli without captions were skipped");
    }
    Ok(InstructionSet { records, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::StimulusTargets;

    #[test]
    fn localization_round_trip() {
        assert_eq!(localization_instruction("zebra"), "Locating the concept of \"zebra\"");
        assert_eq!(
            parse_localization("Locating the concept of \"zebra\"").as_deref(),
            Some("zebra")
        );
        let tricky = "the \"big\" \\ one";
        assert_eq!(
            parse_localization(&localization_instruction(tricky)).as_deref(),
            Some(tricky)
        );
        assert_eq!(parse_localization("where is the train?"), None);
        assert_eq!(parse_localization("Locating the concept of \"open"), None);
    }

    #[test]
    fn template_fill_matches_table_form() {
        assert_eq!(
            fill_localization(LOCALIZATION_TEMPLATES[0], "zebra"),
            "Locating the concept of \"zebra\""
        );
    }

    #[test]
    fn validation_rules() {
        let ok = ConversationRecord::single("s", TaskKind::Brief, "Describe.", "a cat");
        assert_eq!(ok.placeholder().unwrap(), 0);
        let mut two = ok.clone();
        two.turns[1].text = "[image]".into();
        assert!(two.validate().is_err());
        let mut none = ok.clone();
        none.turns[0].text = "Describe.".into();
        assert!(none.validate().is_err());
        let mut swapped = ok.clone();
        swapped.turns.swap(0, 1);
        assert!(swapped.validate().is_err());
    }

    #[test]
    fn record_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = ConversationRecord::single("s", TaskKind::ConceptLoc, "Locating the concept of \"a\"", "a");
        let p = dir.path().join("c.json");
        r.write(&p).unwrap();
        assert_eq!(ConversationRecord::read(&p).unwrap(), r);
    }

    fn store_with(dir: &Path, captions: Vec<String>) -> TargetsStore {
        let store = TargetsStore::new(dir, 1, 1);
        store
            .write(&StimulusTargets {
                stimulus_id: "s0".into(),
                z_c: vec![1.0],
                z_v: vec![1.0],
                captions,
                objects: vec!["zebra".into()],
                conversations: vec![],
                image_path: None,
            })
            .unwrap();
        store
    }

    #[test]
    fn builder_draws_verbatim_templates() {
        let dir = tempfile::tempdir().unwrap();
        let store = store_with(dir.path(), vec!["a zebra".into(), "a photo of a zebra".into()]);
        let ids = vec!["s0".to_string()];
        let set = build_instruction_dataset(
            &store,
            &ids,
            &InstructionTemplates::default(),
            &[TaskKind::Brief],
            1,
        )
        .unwrap();
        assert_eq!(set.records.len(), 1);
        let text = &set.records[0].turns[0].text;
        let instr = text.strip_prefix("[image] ").unwrap();
        assert!(BRIEF_TEMPLATES.contains(&instr));
        assert_eq!(set.records[0].turns[1].text, "a zebra");

        let all = build_instruction_dataset(
            &store,
            &ids,
            &InstructionTemplates::default(),
            &[TaskKind::ReconPrompt, TaskKind::ConceptLoc],
            1,
        )
        .unwrap();
        assert_eq!(all.records[0].turns[1].text, "a photo of a zebra");
        assert_eq!(all.records[1].turns[0].text, "[image] Locating the concept of \"zebra\"");
        assert_eq!(all.records[1].turns[1].text, "zebra");

        let empty = InstructionTemplates {
            brief: vec![],
            ..InstructionTemplates::default()
        };
        assert!(build_instruction_dataset(&store, &ids, &empty, &[TaskKind::Brief], 1).is_err());
    }

    #[test]
    fn stimuli_without_captions_are_counted() {
        let dir = tempfile::tempdir().unwrap();
        let store = store_with(dir.path(), vec![]);
        let set = build_instruction_dataset(
            &store,
            &["s0".to_string()],
            &InstructionTemplates::default(),
            &[TaskKind::Brief],
            1,
        )
        .unwrap();
        assert_eq!(set.skipped, 1);
        assert!(set.records.is_empty());
    }
}
