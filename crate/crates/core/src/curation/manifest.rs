//! Tab-separated curation manifest with summary trailer.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Kept,
    Removed,
    /// The image could not be processed (undecodable, embedder failure, ...).
    Error,
}

impl Decision {
    pub fn name(&self) -> &'static str {
        match self {
            Decision::Kept => "kept",
            Decision::Removed => "removed",
            Decision::Error => "error",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kept" => Ok(Decision::Kept),
            "removed" => Ok(Decision::Removed),
            "error" => Ok(Decision::Error),
            other => Err(Error::Format(format!("bad decision `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Quality,
    Feature,
    Content,
    None,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Quality => "quality",
            Stage::Feature => "feature",
            Stage::Content => "content",
            Stage::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "quality" => Ok(Stage::Quality),
            "feature" => Ok(Stage::Feature),
            "content" => Ok(Stage::Content),
            "none" => Ok(Stage::None),
            other => Err(Error::Format(format!("bad stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reason {
    Overexposed,
    Underexposed,
    Blurred,
    NearDuplicate,
    LowSemanticContent,
    NonBiological,
    Kept,
}

impl Reason {
    pub fn name(&self) -> &'static str {
        match self {
            Reason::Overexposed => "overexposed",
            Reason::Underexposed => "underexposed",
            Reason::Blurred => "blurred",
            Reason::NearDuplicate => "near-duplicate",
            Reason::LowSemanticContent => "low-semantic-content",
            Reason::NonBiological => "non-biological",
            Reason::Kept => "kept",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "overexposed" => Ok(Reason::Overexposed),
            "underexposed" => Ok(Reason::Underexposed),
            "blurred" => Ok(Reason::Blurred),
            "near-duplicate" => Ok(Reason::NearDuplicate),
            "low-semantic-content" => Ok(Reason::LowSemanticContent),
            "non-biological" => Ok(Reason::NonBiological),
            "kept" => Ok(Reason::Kept),
            other => Err(Error::Format(format!("bad reason `{other}`"))),
        }
    }
}

/// Per-image outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct CurationVerdict {
    pub image_id: String,
    pub decision: Decision,
    pub stage: Stage,
    /// `None` only for error verdicts.
    pub reason: Option<Reason>,
    /// Diagnostic score; `None` only for error verdicts.
    pub score: Option<f64>,
    pub duplicate_of: Option<String>,
}

impl CurationVerdict {
    pub fn validate(&self) -> Result<()> {
        match self.decision {
            Decision::Removed => {
                if self.stage == Stage::None {
                    return Err(Error::Format(format!(
                        "{}: removed verdict with stage none",
                        self.image_id
                    )));
                }
                match self.reason {
                    None | Some(Reason::Kept) => {
                        return Err(Error::Format(format!(
                            "{}: removed verdict without a removal reason",
                            self.image_id
                        )))
                    }
                    Some(Reason::NearDuplicate) if self.duplicate_of.is_none() => {
                        return Err(Error::Format(format!(
                            "{}: near-duplicate without duplicate_of",
                            self.image_id
                        )))
                    }
                    _ => {}
                }
            }
            Decision::Kept => {
                if self.reason != Some(Reason::Kept) {
                    return Err(Error::Format(format!(
                        "{}: kept verdict must carry reason `kept`",
                        self.image_id
                    )));
                }
            }
            Decision::Error => {
                if self.reason.is_some() {
                    return Err(Error::Format(format!(
                        "{}: error verdict must leave the reason unset",
                        self.image_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Ordered verdicts for one pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct CurationManifest {
    pub verdicts: Vec<CurationVerdict>,
}

impl CurationManifest {
    pub fn kept(&self) -> usize {
        self.count(Decision::Kept)
    }

    pub fn removed(&self) -> usize {
        self.count(Decision::Removed)
    }

    pub fn errored(&self) -> usize {
        self.count(Decision::Error)
    }

    fn count(&self, d: Decision) -> usize {
        self.verdicts.iter().filter(|v| v.decision == d).count()
    }

    /// Removal count attributed to one stage.
    pub fn removed_at(&self, stage: Stage) -> usize {
        self.verdicts
            .iter()
            .filter(|v| v.decision == Decision::Removed && v.stage == stage)
            .count()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# curation-manifest v1\n");
        for v in &self.verdicts {
            let reason = v.reason.map(|r| r.name()).unwrap_or("-");
            let score = v
                .score
                .map(|s| format!("{s}"))
                .unwrap_or_else(|| "-".to_string());
            let dup = v.duplicate_of.as_deref().unwrap_or("-");
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                v.image_id,
                v.decision.name(),
                v.stage.name(),
                reason,
                score,
                dup
            ));
        }
        out.push_str(&format!(
            "# summary kept={} removed={} errored={}\n",
            self.kept(),
            self.removed(),
            self.errored()
        ));
        out
    }

    pub fn parse(text: &str) -> Result<CurationManifest> {
        let mut lines = text.lines();
        match lines.next() {
            Some("# curation-manifest v1") => {}
            _ => return Err(Error::Format("missing manifest header".into())),
        }
        let mut verdicts = Vec::new();
        let mut summary: Option<(usize, usize, usize)> = None;
        for line in lines {
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# summary ") {
                if summary.is_some() {
                    return Err(Error::Format("duplicate summary line".into()));
                }
                let mut kept = None;
                let mut removed = None;
                let mut errored = None;
                for part in rest.split_whitespace() {
                    let (k, v) = part
                        .split_once('=')
                        .ok_or_else(|| Error::Format(format!("bad summary field `{part}`")))?;
                    let n: usize = v
                        .parse()
                        .map_err(|_| Error::Format(format!("bad summary count `{v}`")))?;
                    match k {
                        "kept" => kept = Some(n),
                        "removed" => removed = Some(n),
                        "errored" => errored = Some(n),
                        other => {
                            return Err(Error::Format(format!("bad summary key `{other}`")))
                        }
                    }
                }
                summary = Some((
                    kept.ok_or_else(|| Error::Format("summary missing kept".into()))?,
                    removed.ok_or_else(|| Error::Format("summary missing removed".into()))?,
                    errored.ok_or_else(|| Error::Format("summary missing errored".into()))?,
                ));
                continue;
            }
            if summary.is_some() {
                return Err(Error::Format("record after summary line".into()));
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [path, decision, stage, reason, score, dup] = fields.as_slice() else {
                return Err(Error::Format(format!(
                    "record has {} fields, expected 6",
                    fields.len()
                )));
            };
            if path.is_empty() {
                return Err(Error::Format("empty image path".into()));
            }
            let verdict = CurationVerdict {
                image_id: path.to_string(),
                decision: Decision::parse(decision)?,
                stage: Stage::parse(stage)?,
                reason: match *reason {
                    "-" => None,
                    r => Some(Reason::parse(r)?),
                },
                score: match *score {
                    "-" => None,
                    s => Some(s.parse::<f64>().map_err(|_| {
                        Error::Format(format!("bad score `{s}`"))
                    })?),
                },
                duplicate_of: match *dup {
                    "-" => None,
                    d => Some(d.to_string()),
                },
            };
            verdict.validate()?;
            verdicts.push(verdict);
        }
        let (kept, removed, errored) =
            summary.ok_or_else(|| Error::Format("missing summary line".into()))?;
        let manifest = CurationManifest { verdicts };
        if manifest.kept() != kept || manifest.removed() != removed || manifest.errored() != errored
        {
            return Err(Error::Format(format!(
                "summary kept={kept} removed={removed} errored={errored} does not match records \
                 ({}/{}/{})",
                manifest.kept(),
                manifest.removed(),
                manifest.errored()
            )));
        }
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CurationManifest {
        CurationManifest {
            verdicts: vec![
                CurationVerdict {
                    image_id: "a.png".into(),
                    decision: Decision::Kept,
                    stage: Stage::None,
                    reason: Some(Reason::Kept),
                    score: Some(1.0),
                    duplicate_of: None,
                },
                CurationVerdict {
                    image_id: "b.png".into(),
                    decision: Decision::Removed,
                    stage: Stage::Feature,
                    reason: Some(Reason::NearDuplicate),
                    score: Some(0.993),
                    duplicate_of: Some("a.png".into()),
                },
                CurationVerdict {
                    image_id: "c.png".into(),
                    decision: Decision::Error,
                    stage: Stage::Quality,
                    reason: None,
                    score: None,
                    duplicate_of: None,
                },
            ],
        }
    }

    #[test]
    fn round_trip() {
        let m = sample();
        let text = m.to_text();
        assert!(text.starts_with("# curation-manifest v1\n"));
        assert!(text.contains("# summary kept=1 removed=1 errored=1"));
        let back = CurationManifest::parse(&text).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn parse_rejects_inconsistencies() {
        let m = sample();
        let good = m.to_text();
        assert!(CurationManifest::parse("").is_err());
        assert!(CurationManifest::parse("# curation-manifest v2\n").is_err());
        // summary count lies
        let lied = good.replace("kept=1", "kept=2");
        assert!(CurationManifest::parse(&lied).is_err());
        // removed row with stage none violates the verdict invariant
        let bad = "# curation-manifest v1\nx\tremoved\tnone\tblurred\t1\t-\n# summary kept=0 removed=1 errored=0\n";
        assert!(CurationManifest::parse(bad).is_err());
        // near-duplicate without duplicate_of
        let bad = "# curation-manifest v1\nx\tremoved\tfeature\tnear-duplicate\t1\t-\n# summary kept=0 removed=1 errored=0\n";
        assert!(CurationManifest::parse(bad).is_err());
        // missing summary
        assert!(CurationManifest::parse("# curation-manifest v1\n").is_err());
    }
}
