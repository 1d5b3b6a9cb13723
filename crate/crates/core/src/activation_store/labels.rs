// SPDX-License-Identifier: MIT OR Apache-2.0

//! The 32 probe-target constructs and the line-delimited label file.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde_json::Value;

use crate::error::{Error, Result};

/// Maps a 1–5 Likert score to `{0, 1}`: below 3 is 0, otherwise 1.
pub fn binarize(raw: u8) -> Result<u8> {
    match raw {
        1 | 2 => Ok(0),
        3..=5 => Ok(1),
        other => Err(Error::ScoreOutOfRange {
            construct: String::new(),
            value: other as i64,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConstructCategory {
    Appraisal,
    Emotion,
    BehavioralIntention,
    ConsumerVariable,
}

macro_rules! constructs {
    ($( $variant:ident => $name:literal, $cat:ident; )*) => {
        /// A labeled probe target.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum Construct {
            $( $variant, )*
        }

        impl Construct {
            /// All constructs in catalogue order.
            pub const ALL: [Construct; 32] = [ $( Construct::$variant, )* ];

            /// Field name in the label file.
            pub fn name(self) -> &'static str {
                match self {
                    $( Construct::$variant => $name, )*
                }
            }

            pub fn category(self) -> ConstructCategory {
                match self {
                    $( Construct::$variant => ConstructCategory::$cat, )*
                }
            }
        }
    };
}

constructs! {
    AccountabilityCircumstances => "accountability_circumstances", Appraisal;
    AccountabilityOther => "accountability_other", Appraisal;
    AccountabilitySelf => "accountability_self", Appraisal;
    AttentionalActivity => "attentional_activity", Appraisal;
    Certainty => "certainty", Appraisal;
    ControlCircumstances => "control_circumstances", Appraisal;
    ControlOther => "control_other", Appraisal;
    ControlSelf => "control_self", Appraisal;
    CopingPotential => "coping_potential", Appraisal;
    Difficulty => "difficulty", Appraisal;
    Effort => "effort", Appraisal;
    Expectedness => "expectedness", Appraisal;
    ExternalNormativeSignificance => "external_normative_significance", Appraisal;
    Fairness => "fairness", Appraisal;
    FutureExpectancy => "future_expectancy", Appraisal;
    GoalConduciveness => "goal_conduciveness", Appraisal;
    GoalRelevance => "goal_relevance", Appraisal;
    Novelty => "novelty", Appraisal;
    PerceivedObstacle => "perceived_obstacle", Appraisal;
    Pleasantness => "pleasantness", Appraisal;
    Anger => "anger", Emotion;
    Disappointment => "disappointment", Emotion;
    Disgust => "disgust", Emotion;
    Gratitude => "gratitude", Emotion;
    Joy => "joy", Emotion;
    Pride => "pride", Emotion;
    Regret => "regret", Emotion;
    Surprise => "surprise", Emotion;
    IntentToPromote => "intent_to_promote", BehavioralIntention;
    IntentToRepurchase => "intent_to_repurchase", BehavioralIntention;
    Helpfulness => "helpfulness", ConsumerVariable;
    Trustworthiness => "trustworthiness", ConsumerVariable;
}

impl Construct {
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Construct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Construct {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Construct::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownConstruct(s.to_string()))
    }
}

/// One annotated review.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRecord {
    pub id: String,
    pub text: String,
    raw: [u8; 32],
    binary: [u8; 32],
}

impl LabelRecord {
    /// Validates every raw score and derives the binary values.
    pub fn new(id: impl Into<String>, text: impl Into<String>, raw: [u8; 32]) -> Result<Self> {
        let mut binary = [0u8; 32];
        for (c, (&r, b)) in Construct::ALL.iter().zip(raw.iter().zip(binary.iter_mut())) {
            *b = binarize(r).map_err(|_| Error::ScoreOutOfRange {
                construct: c.name().to_string(),
                value: r as i64,
            })?;
        }
        Ok(LabelRecord {
            id: id.into(),
            text: text.into(),
            raw,
            binary,
        })
    }

    pub fn raw(&self, construct: Construct) -> u8 {
        self.raw[construct.index()]
    }

    pub fn binary(&self, construct: Construct) -> u8 {
        self.binary[construct.index()]
    }
}

/// Labels for a sample set, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelTable {
    records: Vec<LabelRecord>,
}

impl LabelTable {
    pub fn new(records: Vec<LabelRecord>) -> Result<Self> {
        let mut seen = HashMap::new();
        for r in &records {
            if seen.insert(r.id.as_str(), ()).is_some() {
                return Err(Error::DuplicateSampleId(r.id.clone()));
            }
        }
        Ok(LabelTable { records })
    }

    pub fn records(&self) -> &[LabelRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Binary label vector for one construct.
    pub fn binary(&self, construct: Construct) -> Vec<u8> {
        self.records.iter().map(|r| r.binary(construct)).collect()
    }

    /// Reorders the table to follow `ids` (typically an activation file's
    /// sample ids). Every id must be present.
    pub fn aligned_to(&self, ids: &[String]) -> Result<LabelTable> {
        let index: HashMap<&str, usize> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect();
        let records = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|&i| self.records[i].clone())
                    .ok_or_else(|| Error::LengthMismatch(format!("no label record for sample `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabelTable { records })
    }

    /// Parses a JSON-lines label file. Blank lines are skipped.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(parse_record(&line, n + 1)?);
        }
        LabelTable::new(records)
    }

    pub fn read_from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        LabelTable::from_reader(std::io::BufReader::new(file))
    }

    /// Writes one JSON object per line: `id`, `text`, then the constructs in
    /// catalogue order.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            let mut line = String::new();
            line.push_str("{\"id\":");
            line.push_str(&serde_json::to_string(&r.id)?);
            line.push_str(",\"text\":");
            line.push_str(&serde_json::to_string(&r.text)?);
            for c in Construct::ALL {
                line.push_str(&format!(",\"{}\":{}", c.name(), r.raw(c)));
            }
            line.push_str("}\n");
            out.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn write_to_path(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn parse_record(line: &str, line_no: usize) -> Result<LabelRecord> {
    let bad = |message: String| Error::LabelRecord {
        line: line_no,
        message,
    };
    let value: Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| bad("record is not a JSON object".into()))?;
    let id = obj
        .get("id")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing string field `id`".into()))?;
    let text = obj
        .get("text")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing string field `text`".into()))?;
    for key in obj.keys() {
        if key != "id" && key != "text" && key.parse::<Construct>().is_err() {
            return Err(bad(format!("unknown field `{key}`")));
        }
    }
    let mut raw = [0u8; 32];
    for c in Construct::ALL {
        let v = obj
            .get(c.name())
            .ok_or_else(|| bad(format!("missing construct `{}`", c.name())))?;
        let score = v
            .as_i64()
            .ok_or_else(|| bad(format!("`{}` is not an integer", c.name())))?;
        if !(1..=5).contains(&score) {
            return Err(Error::ScoreOutOfRange {
                construct: c.name().to_string(),
                value: score,
            });
        }
        raw[c.index()] = score as u8;
    }
    LabelRecord::new(id, text, raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_threshold() {
        assert_eq!(binarize(2).unwrap(), 0);
        assert_eq!(binarize(3).unwrap(), 1);
        assert_eq!(binarize(5).unwrap(), 1);
        assert_eq!(binarize(1).unwrap(), 0);
    }

    #[test]
    fn binarize_rejects_out_of_range() {
        for bad in [0u8, 6, 255] {
            match binarize(bad) {
                Err(Error::ScoreOutOfRange { value, .. }) => assert_eq!(value, bad as i64),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn binarize_is_monotone() {
        let out: Vec<u8> = (1..=5).map(|r| binarize(r).unwrap()).collect();
        assert!(out.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn catalogue_matches_table() {
        use ConstructCategory::*;
        let count = |cat| Construct::ALL.iter().filter(|c| c.category() == cat).count();
        assert_eq!(Construct::ALL.len(), 32);
        assert_eq!(count(Appraisal), 20);
        assert_eq!(count(Emotion), 8);
        assert_eq!(count(BehavioralIntention), 2);
        assert_eq!(count(ConsumerVariable), 2);
        for (i, c) in Construct::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(c.name().parse::<Construct>().unwrap(), *c);
        }
    }

    #[test]
    fn file_round_trip_and_errors() {
        let mut raw = [3u8; 32];
        raw[Construct::Trustworthiness.index()] = 2;
        let table = LabelTable::new(vec![LabelRecord::new("r1", "a \"quoted\" text", raw).unwrap()]).unwrap();
        let mut buf = Vec::new();
        table.write(&mut buf).unwrap();
        let back = LabelTable::from_reader(&buf[..]).unwrap();
        assert_eq!(back, table);
        assert_eq!(back.binary(Construct::Trustworthiness), vec![0]);
        assert_eq!(back.binary(Construct::Joy), vec![1]);

        let text = String::from_utf8(buf).unwrap();
        let broken = text.replace("\"joy\":3", "\"joy\":7");
        assert!(matches!(
            LabelTable::from_reader(broken.as_bytes()),
            Err(Error::ScoreOutOfRange { value: 7, .. })
        ));
        let missing = text.replace(",\"joy\":3", "");
        assert!(matches!(
            LabelTable::from_reader(missing.as_bytes()),
            Err(Error::LabelRecord { line: 1, .. })
        ));
    }
}
