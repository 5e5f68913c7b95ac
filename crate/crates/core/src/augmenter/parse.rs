use serde_json::Value;

use super::pools::resolve_ia;
use super::View;
use crate::kg::{IaTriplet, ItemId, UserId, Vocab};

/// Vocabulary-resolved advice from one response.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PoolDelta {
    pub add_ia: Vec<IaTriplet>,
    pub del_ia: Vec<IaTriplet>,
    pub del_ui: Vec<(UserId, ItemId)>,
}

impl PoolDelta {
    pub fn len(&self) -> usize {
        self.add_ia.len() + self.del_ia.len() + self.del_ui.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseOutcome {
    pub delta: PoolDelta,
    /// Entries dropped for unknown names, wrong roles or bad shape.
    pub rejected: usize,
    /// No JSON object could be recovered from the response.
    pub parse_failed: bool,
}

/// Finds the JSON object in a response, tolerating surrounding prose or code fences.
fn extract_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    if let Ok(Value::Object(m)) = serde_json::from_str::<Value>(text.trim()) {
        return Some(m);
    }
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    if end <= start {
        return None;
    }
    match serde_json::from_str::<Value>(&text[start..=end]) {
        Ok(Value::Object(m)) => Some(m),
        _ => None,
    }
}

fn triple(v: &Value) -> Option<[&str; 3]> {
    let arr = v.as_array()?;
    if arr.len() != 3 {
        return None;
    }
    Some([arr[0].as_str()?, arr[1].as_str()?, arr[2].as_str()?])
}

/// Parses `{"add_ia": [[h,r,t],...], "del_ia": [...], "del_ui": [[user,"interact",item],...]}`.
///
/// Names must match the vocabulary exactly and have the right role; anything
/// else is dropped and counted. `del_ui` is only honored for the user view.
pub fn parse_response(text: &str, vocab: &Vocab, view: View) -> ParseOutcome {
    let Some(obj) = extract_object(text) else {
        return ParseOutcome {
            parse_failed: true,
            ..Default::default()
        };
    };
    let mut out = ParseOutcome::default();
    let ia_list = |key: &str, sink: &mut Vec<IaTriplet>, rejected: &mut usize| match obj.get(key) {
        None => {}
        Some(Value::Array(entries)) => {
            for e in entries {
                match triple(e).and_then(|[h, r, t]| resolve_ia(vocab, h, r, t)) {
                    Some(t) => sink.push(t),
                    None => *rejected += 1,
                }
            }
        }
        Some(_) => *rejected += 1,
    };
    ia_list("add_ia", &mut out.delta.add_ia, &mut out.rejected);
    ia_list("del_ia", &mut out.delta.del_ia, &mut out.rejected);
    match obj.get("del_ui") {
        None => {}
        Some(Value::Array(entries)) if view == View::User => {
            for e in entries {
                let resolved = triple(e).and_then(|[h, r, t]| {
                    let u = vocab.find_user(h)?;
                    (vocab.find_relation(r)? == vocab.interact()).then_some(())?;
                    Some((u, vocab.find_item(t)?))
                });
                match resolved {
                    Some(pair) => out.delta.del_ui.push(pair),
                    None => out.rejected += 1,
                }
            }
        }
        Some(Value::Array(entries)) => out.rejected += entries.len(),
        Some(_) => out.rejected += 1,
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::RelationKind;

    fn vocab() -> Vocab {
        let mut v = Vocab::new();
        v.user("u1");
        v.item("apple");
        v.item("banana");
        v.relation("has_category", RelationKind::ItemAttribute)
            .unwrap();
        v.relation("same_category", RelationKind::ItemItem).unwrap();
        v.attribute("fruit");
        v
    }

    #[test]
    fn known_names_become_one_add() {
        let v = vocab();
        let out = parse_response(
            r#"{"add_ia":[["apple","has_category","fruit"]]}"#,
            &v,
            View::Item,
        );
        assert_eq!(out.delta.add_ia.len(), 1);
        assert_eq!(out.rejected, 0);
        assert!(!out.parse_failed);
    }

    #[test]
    fn unknown_entity_is_dropped() {
        let v = vocab();
        let out = parse_response(
            r#"{"add_ia":[["dragonfruit","has_category","fruit"],["apple","has_category","fruit"]]}"#,
            &v,
            View::User,
        );
        assert_eq!(out.delta.add_ia.len(), 1);
        assert_eq!(out.rejected, 1);
    }

    #[test]
    fn prose_is_a_parse_failure() {
        let out = parse_response("Sorry, I cannot help with that.", &vocab(), View::User);
        assert!(out.parse_failed);
        assert!(out.delta.is_empty());
    }

    #[test]
    fn fenced_json_and_roles() {
        let v = vocab();
        let text = "Here you go:\n```json\n{\"del_ia\": [[\"apple\",\"same_category\",\"fruit\"]], \
                    \"del_ui\": [[\"u1\",\"interact\",\"banana\"], [\"apple\",\"interact\",\"u1\"]]}\n```";
        let out = parse_response(text, &v, View::User);
        assert!(!out.parse_failed);
        // II relation in an IA slot and swapped roles are rejected
        assert_eq!(out.rejected, 2);
        assert_eq!(out.delta.del_ui.len(), 1);

        let item_view = parse_response(text, &v, View::Item);
        assert!(item_view.delta.del_ui.is_empty());
        assert_eq!(item_view.rejected, 3);
    }
}
