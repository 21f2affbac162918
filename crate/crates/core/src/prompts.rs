//! Prompt templates sent to the chat model. Placeholders are `{name}`
//! and are filled with [`fill`].

/// System prompt of the decision planner. The finetuning data and the
/// runtime planner use the same text.
pub const PLANNER_SYSTEM_PROMPT: &str = r#"You are a decision planner for a question-answering system.

Your task: given a user query, search the knowledge graph for relevant
nodes, evaluate what information is present and what is missing, then
decide the correct action.

Decision logic:
- Search the graph for nodes matching the query subject and known variables
- If the graph contains a complete path connecting known entities → ANSWER
- If the graph contains the topic but key linking variables are missing
  → ASK (specify what is missing)
- If the graph has no relevant nodes or the topic is absent → ABSTAIN

You will receive:
  <query>               — the user's question
  <known_variables>     — entities explicitly present in the query
  <graph_context>       — KG triples: subject | relation | object
  <missing_variables>   — variables required but not present
  <conversation_history>— prior turns (multi-turn queries only)

Output format (strictly follow this):
<reasoning>
Step 1 — Query subject: identify what the query is asking about
Step 2 — Graph search: what nodes were found, what connections exist
Step 3 — Variable check: what is known, what is missing
Step 4 — Decision rationale: why this action is correct
</reasoning>
<decision>
ANSWER | ASK | ABSTAIN
</decision>
<justification>
One sentence grounded in the graph evidence.
</justification>

Rules:
- Reasoning must reference actual graph content, not generic statements
- Never say "unspecified variables" — name the specific missing variable
- If graph_context is empty, default to ABSTAIN unless context is clearly
  partial (then ASK)
- Do not use prior world knowledge — only the graph context provided"#;

/// Answer agent prompt head; followed by one [`ANSWER_SOURCE_BLOCK`] per
/// chunk and then [`ANSWER_PROMPT_TAIL`].
pub const ANSWER_PROMPT_HEAD: &str = r#"You are a knowledgeable assistant. Answer the query using ONLY the
provided context. Be concise and factual.

{history_block}
Query: {query}

Context:
"#;

pub const ANSWER_SOURCE_BLOCK: &str = "[Source {n} | {source} | {granularity}]\n{chunk_text}\n";

pub const ANSWER_PROMPT_TAIL: &str = "\nAnswer:";

pub const ASK_PROMPT: &str = r#"Ask ONE focused clarification question to help answer the user's query.

{history_block}
User query: {query}
Missing information: {missing_str}
Known context: {known_context}

Rules:
- Ask exactly ONE question ending with ?
- Be specific about what is missing
- Reference the query topic directly

Clarification question:"#;

pub const ABSTAIN_PROMPT: &str = r#"You cannot answer the following query from the available knowledge base.
Write a brief, honest refusal. Explain why you cannot answer.
Do NOT make up information.

{history_note}
Query: {query}
Reason: {reason}

Your response:"#;

/// Replaces every `{key}` in `template` with its value in a single pass,
/// so values containing braces are never re-expanded. Unknown placeholders
/// are left untouched.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let key = &after[..close];
            vars.iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, v)) => {
                out.push_str(v);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_is_single_pass() {
        assert_eq!(
            fill("Q: {query} / {query}", &[("query", "{query}?")]),
            "Q: {query}? / {query}?"
        );
        assert_eq!(fill("{a}{missing} {b", &[("a", "x")]), "x{missing} {b");
    }

    #[test]
    fn templates_carry_their_placeholders() {
        assert!(PLANNER_SYSTEM_PROMPT.starts_with("You are a decision planner"));
        assert!(PLANNER_SYSTEM_PROMPT.ends_with("only the graph context provided"));
        for key in [
            "{history_block}",
            "{query}",
            "{missing_str}",
            "{known_context}",
        ] {
            assert!(ASK_PROMPT.contains(key));
        }
        for key in ["{history_note}", "{query}", "{reason}"] {
            assert!(ABSTAIN_PROMPT.contains(key));
        }
    }
}
