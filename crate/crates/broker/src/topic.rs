//! Topic names, topic filters and MQTT wildcard matching.

use std::fmt;

use thiserror::Error;

pub const MAX_TOPIC_BYTES: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopicError {
    #[error("empty topic")]
    Empty,
    #[error("topic longer than {MAX_TOPIC_BYTES} bytes")]
    TooLong,
    #[error("empty topic segment")]
    EmptySegment,
    #[error("wildcard or NUL in topic name")]
    WildcardInName,
    #[error("misplaced wildcard in filter")]
    MisplacedWildcard,
}

/// A concrete topic: one or more non-empty segments without wildcards.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TopicName(String);

impl TopicName {
    pub fn parse(topic: &str) -> Result<Self, TopicError> {
        check_common(topic)?;
        if topic.contains(['+', '#', '\0']) {
            return Err(TopicError::WildcardInName);
        }
        Ok(Self(topic.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }
}

impl fmt::Display for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FilterSegment {
    Literal(String),
    SingleLevel,
    MultiLevel,
}

/// A subscription filter; `+` matches one segment, a trailing `#` matches
/// zero or more remaining segments.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TopicFilter {
    raw: String,
    segments: Vec<FilterSegment>,
}

impl TopicFilter {
    pub fn parse(filter: &str) -> Result<Self, TopicError> {
        check_common(filter)?;
        if filter.contains('\0') {
            return Err(TopicError::WildcardInName);
        }
        let parts: Vec<&str> = filter.split('/').collect();
        let last = parts.len() - 1;
        let segments = parts
            .iter()
            .enumerate()
            .map(|(i, seg)| match *seg {
                "+" => Ok(FilterSegment::SingleLevel),
                "#" if i == last => Ok(FilterSegment::MultiLevel),
                s if s.contains(['+', '#']) => Err(TopicError::MisplacedWildcard),
                s => Ok(FilterSegment::Literal(s.to_string())),
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            raw: filter.to_string(),
            segments,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn segments(&self) -> &[FilterSegment] {
        &self.segments
    }

    pub fn matches(&self, topic: &TopicName) -> bool {
        topic_matches(self, topic)
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

fn check_common(s: &str) -> Result<(), TopicError> {
    if s.is_empty() {
        return Err(TopicError::Empty);
    }
    if s.len() > MAX_TOPIC_BYTES {
        return Err(TopicError::TooLong);
    }
    if s.split('/').any(str::is_empty) {
        return Err(TopicError::EmptySegment);
    }
    Ok(())
}

pub fn topic_matches(filter: &TopicFilter, topic: &TopicName) -> bool {
    let mut levels = topic.segments();
    for seg in &filter.segments {
        match seg {
            FilterSegment::MultiLevel => return true,
            FilterSegment::SingleLevel => {
                if levels.next().is_none() {
                    return false;
                }
            }
            FilterSegment::Literal(lit) => match levels.next() {
                Some(level) if level == lit => {}
                _ => return false,
            },
        }
    }
    levels.next().is_none()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(filter: &str, topic: &str) -> bool {
        topic_matches(&TopicFilter::parse(filter).unwrap(), &TopicName::parse(topic).unwrap())
    }

    #[test]
    fn matching_examples() {
        assert!(m("smarthome/+/state/#", "smarthome/h1/state/kitchen/light"));
        assert!(m("a/b", "a/b"));
        assert!(!m("a/+", "a/b/c"));
        assert!(m("a/#", "a"));
        assert!(m("#", "a/b/c"));
        assert!(!m("a/b", "a/b/c"));
        assert!(!m("a/b/c", "a/b"));
        assert!(m("+/+", "x/y"));
    }

    #[test]
    fn filter_validation() {
        assert!(TopicFilter::parse("smarthome/#").is_ok());
        assert_eq!(TopicFilter::parse("a/#/b"), Err(TopicError::MisplacedWildcard));
        assert_eq!(TopicFilter::parse("a/b#"), Err(TopicError::MisplacedWildcard));
        assert_eq!(TopicFilter::parse("a/+b"), Err(TopicError::MisplacedWildcard));
        assert_eq!(TopicFilter::parse(""), Err(TopicError::Empty));
        assert_eq!(TopicFilter::parse("a//b"), Err(TopicError::EmptySegment));
    }

    #[test]
    fn name_validation() {
        assert!(TopicName::parse("rca/state/h1/lamp").is_ok());
        assert_eq!(TopicName::parse("a/+"), Err(TopicError::WildcardInName));
        assert_eq!(TopicName::parse("a/#"), Err(TopicError::WildcardInName));
        assert_eq!(TopicName::parse("a\0b"), Err(TopicError::WildcardInName));
        assert_eq!(TopicName::parse(&"a".repeat(513)), Err(TopicError::TooLong));
        assert!(TopicName::parse(&"a".repeat(512)).is_ok());
    }
}
