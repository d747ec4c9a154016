use super::{Result, Slot, Task, ToyworldError, View};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const IMG: u32 = 2;

/// Fixed instruction vocabulary; the index is the token id.
pub const VOCAB: [&str; 40] = [
    "<bos>", "<eos>", "<img>", "<pad>", "a", "and", "back", "both", "bottom", "dress", "extract", "flat", "from",
    "front", "garment", "garments", "generate", "wearing", "image", "in", "lay", "model", "new", "of", "on", "onto",
    "other", "person", "pose", "put", "replace", "reconstruct", "show", "the", "this", "to", "top", "transfer",
    "view", "with",
];

pub struct Vocab;

impl Vocab {
    pub fn len() -> usize {
        VOCAB.len()
    }

    pub fn id(word: &str) -> Result<u32> {
        VOCAB
            .iter()
            .position(|&w| w == word)
            .map(|i| i as u32)
            .ok_or_else(|| ToyworldError::UnknownWord(word.to_string()))
    }
}

/// Slot and view choices that parameterize an instruction template.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstructionSlots {
    pub slot: Slot,
    pub view: View,
}

/// Templated instruction text; `<img>` marks where reference-image tokens are spliced.
pub fn instruction_text(task: Task, slots: InstructionSlots) -> String {
    let s = slots.slot.name();
    let body = match task {
        Task::SingleGarment => format!("replace the {s} garment of the person <img> with this garment <img>"),
        Task::ModelFree => format!("generate a person in the pose wearing this {s} garment <img>"),
        Task::GarmentRecon => format!("reconstruct the flat {s} garment from the person <img>"),
        Task::MultiView => {
            format!("dress the person in the {s} garment front <img> back <img> and show the {} view", slots.view.name())
        }
        Task::MultiGarment => "dress the person in both the top garment <img> and the bottom garment <img>".to_string(),
        Task::ModelToModel => format!("transfer the {s} garment from this model <img> to the other model <img>"),
    };
    format!("<bos> {body} <eos>")
}

/// Tokenizes whitespace-separated words against the fixed vocabulary.
pub fn tokenize_text(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace().map(Vocab::id).collect()
}

pub fn tokenize_instruction(task: Task, slots: InstructionSlots) -> Result<Vec<u32>> {
    tokenize_text(&instruction_text(task, slots))
}

pub fn detokenize(ids: &[u32]) -> String {
    ids.iter().map(|&i| VOCAB.get(i as usize).copied().unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slots() -> InstructionSlots {
        InstructionSlots { slot: Slot::Top, view: View::Front }
    }

    #[test]
    fn every_template_tokenizes_with_bos_eos() {
        for task in Task::ALL {
            for slot in Slot::ALL {
                for view in [View::Front, View::Back] {
                    let ids = tokenize_instruction(task, InstructionSlots { slot, view }).unwrap();
                    assert_eq!(ids[0], BOS);
                    assert_eq!(*ids.last().unwrap(), EOS);
                    assert_eq!(ids, tokenize_instruction(task, InstructionSlots { slot, view }).unwrap());
                }
            }
        }
    }

    #[test]
    fn multi_garment_mentions_both_slots() {
        let ids = tokenize_instruction(Task::MultiGarment, slots()).unwrap();
        assert!(ids.contains(&Vocab::id("top").unwrap()));
        assert!(ids.contains(&Vocab::id("bottom").unwrap()));
    }

    #[test]
    fn img_placeholders_match_reference_counts() {
        let counts = [2, 1, 1, 2, 2, 2];
        for (task, n) in Task::ALL.into_iter().zip(counts) {
            let ids = tokenize_instruction(task, slots()).unwrap();
            assert_eq!(ids.iter().filter(|&&i| i == IMG).count(), n, "{task}");
        }
    }

    #[test]
    fn unknown_word_is_an_error() {
        assert!(matches!(tokenize_text("<bos> teleport <eos>"), Err(ToyworldError::UnknownWord(w)) if w == "teleport"));
    }

    #[test]
    fn vocabulary_has_no_duplicates() {
        let mut v = VOCAB.to_vec();
        v.sort();
        v.dedup();
        assert_eq!(v.len(), VOCAB.len());
    }
}
