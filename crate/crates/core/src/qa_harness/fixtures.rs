//! Small bundled samples in each benchmark's shape.

use super::{
    parse_jsonl, ClsExample, Dataset, HarnessError, McqExample, Strictness, YES_NO, YES_NO_MAYBE,
};

/// Name accepted wherever a dataset path is expected, selecting every bundled
/// sample of the requested task kind.
pub const BUNDLED_ALIAS: &str = "appendix_fixture";

const MEDMCQA: &str = include_str!("../../fixtures/medmcqa_sample.jsonl");
const MEDQA: &str = include_str!("../../fixtures/medqa_sample.jsonl");
const MMLU: &str = include_str!("../../fixtures/mmlu_sample.jsonl");
const PUBMEDQA: &str = include_str!("../../fixtures/pubmedqa_sample.jsonl");
const BIOASQ: &str = include_str!("../../fixtures/bioasq_sample.jsonl");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fixture {
    MedMcqa,
    MedQa,
    Mmlu,
    PubMedQa,
    BioAsq,
}

impl Fixture {
    pub const ALL: [Fixture; 5] = [
        Fixture::MedMcqa,
        Fixture::MedQa,
        Fixture::Mmlu,
        Fixture::PubMedQa,
        Fixture::BioAsq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Fixture::MedMcqa => "medmcqa",
            Fixture::MedQa => "medqa",
            Fixture::Mmlu => "mmlu",
            Fixture::PubMedQa => "pubmedqa",
            Fixture::BioAsq => "bioasq",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn text(self) -> &'static str {
        match self {
            Fixture::MedMcqa => MEDMCQA,
            Fixture::MedQa => MEDQA,
            Fixture::Mmlu => MMLU,
            Fixture::PubMedQa => PUBMEDQA,
            Fixture::BioAsq => BIOASQ,
        }
    }

    pub fn is_mcq(self) -> bool {
        matches!(self, Fixture::MedMcqa | Fixture::MedQa | Fixture::Mmlu)
    }

    pub fn labels(self) -> Vec<String> {
        let set: &[&str] = match self {
            Fixture::BioAsq => &YES_NO,
            _ => &YES_NO_MAYBE,
        };
        set.iter().map(|s| s.to_string()).collect()
    }

    pub fn load(self) -> Result<Dataset, HarnessError> {
        if self.is_mcq() {
            let l = parse_jsonl::<McqExample>(self.text(), &[], Strictness::Strict)?;
            Ok(Dataset::Mcq(l.examples))
        } else {
            let labels = self.labels();
            let l = parse_jsonl::<ClsExample>(self.text(), &labels, Strictness::Strict)?;
            Ok(Dataset::Cls {
                labels,
                examples: l.examples,
            })
        }
    }
}

/// All bundled multiple-choice samples, in a fixed order.
pub fn bundled_mcq() -> Result<Vec<McqExample>, HarnessError> {
    let mut out = Vec::new();
    for f in Fixture::ALL.into_iter().filter(|f| f.is_mcq()) {
        if let Dataset::Mcq(e) = f.load()? {
            out.extend(e);
        }
    }
    Ok(out)
}

/// All bundled yes/no samples under the three-way label set.
pub fn bundled_cls() -> Result<(Vec<String>, Vec<ClsExample>), HarnessError> {
    let labels: Vec<String> = YES_NO_MAYBE.iter().map(|s| s.to_string()).collect();
    let mut out = Vec::new();
    for f in Fixture::ALL.into_iter().filter(|f| !f.is_mcq()) {
        out.extend(parse_jsonl::<ClsExample>(f.text(), &labels, Strictness::Strict)?.examples);
    }
    Ok((labels, out))
}
