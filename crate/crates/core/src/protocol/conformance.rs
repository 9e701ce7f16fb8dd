//! Backend-agnostic protocol checks: shapes, ordering, determinism and the
//! greedy/top-1 equivalence. The mock passes these in-process and over the
//! wire; any real adapter is expected to pass the same list.

use super::{LvlmBackend, SequenceContext};
use crate::text::TokenId;
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConformanceReport {
    pub checks: Vec<CheckOutcome>,
}

impl ConformanceReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

fn outcome(name: &'static str, r: Result<(), String>) -> CheckOutcome {
    match r {
        Ok(()) => CheckOutcome {
            name,
            passed: true,
            detail: String::new(),
        },
        Err(detail) => CheckOutcome {
            name,
            passed: false,
            detail,
        },
    }
}

/// Runs every check against `image_ref`.
pub fn run<B: LvlmBackend + ?Sized>(backend: &B, image_ref: &str) -> ConformanceReport {
    let mut checks = Vec::new();
    let info = match backend.model_info() {
        Ok(i) => i,
        Err(e) => {
            checks.push(outcome("describe", Err(e.to_string())));
            return ConformanceReport { checks };
        }
    };
    checks.push(outcome(
        "describe",
        if info.hidden_dim == 0 {
            Err("hidden_dim is zero".into())
        } else if (info.eos_id as usize) >= info.vocab_size() || (info.period_id as usize) >= info.vocab_size() {
            Err("special token ids outside vocabulary".into())
        } else {
            Ok(())
        },
    ));

    let stops: Vec<TokenId> = info.stop_tokens().to_vec();
    let ctx = SequenceContext::caption(image_ref, Vec::new());

    // Greedy caption, used as a realistic prefix for later checks.
    let caption = backend.greedy_extend(&ctx, &[info.eos_id], true);
    checks.push(outcome(
        "greedy_extend determinism",
        match (&caption, backend.greedy_extend(&ctx, &[info.eos_id], true)) {
            (Ok(a), Ok(b)) if *a == b => Ok(()),
            (Ok(_), Ok(_)) => Err("two identical greedy calls differ".into()),
            (Err(e), _) => Err(e.to_string()),
            (_, Err(e)) => Err(e.to_string()),
        },
    ));
    let caption = caption.map(|c| c.tokens).unwrap_or_default();
    let mid = caption.len() / 2;
    let prefixes: Vec<Vec<TokenId>> = vec![Vec::new(), caption[..mid].to_vec()];

    checks.push(outcome("top_k shape and order", {
        let mut r = Ok(());
        for p in &prefixes {
            for k in [1usize, 3, 7] {
                let k = k.min(info.vocab_size());
                match backend.top_k_next(&ctx.with_prefix(p.clone()), k, true) {
                    Ok(step) => {
                        if let Err(e) = step.validate(k, info.hidden_dim) {
                            r = Err(e.to_string());
                        }
                    }
                    Err(e) => r = Err(e.to_string()),
                }
            }
        }
        r
    }));

    checks.push(outcome("top_k prefix stability", {
        let mut r = Ok(());
        for p in &prefixes {
            let c = ctx.with_prefix(p.clone());
            let small = backend.top_k_next(&c, 2.min(info.vocab_size()), true);
            let large = backend.top_k_next(&c, 9.min(info.vocab_size()), true);
            match (small, large) {
                (Ok(s), Ok(l)) => {
                    if l.top_tokens[..s.top_tokens.len()] != s.top_tokens[..] {
                        r = Err(format!("k=2 result is not a prefix of k=9 at prefix len {}", p.len()));
                    }
                }
                (Err(e), _) | (_, Err(e)) => r = Err(e.to_string()),
            }
        }
        r
    }));

    checks.push(outcome("full distribution normalized", {
        match backend.top_k_next(&ctx, info.vocab_size(), true) {
            Ok(step) => {
                let total: f64 = step.top_tokens.iter().map(|t| t.1).sum();
                if (total - 1.0).abs() <= 1e-6 {
                    Ok(())
                } else {
                    Err(format!("probabilities sum to {total}"))
                }
            }
            Err(e) => Err(e.to_string()),
        }
    }));

    checks.push(outcome("greedy equals iterated top-1", {
        let c = ctx.with_prefix(prefixes[1].clone());
        match backend.greedy_extend(&c, &stops, true) {
            Ok(g) => {
                let mut prefix = c.prefix_tokens.clone();
                let mut manual = Vec::new();
                let mut r = Ok(());
                for _ in 0..g.tokens.len() {
                    match backend.top_k_next(&c.with_prefix(prefix.clone()), 1, true) {
                        Ok(step) => {
                            let t = step.top_tokens[0].0;
                            manual.push(t);
                            prefix.push(t);
                            if stops.contains(&t) {
                                break;
                            }
                        }
                        Err(e) => {
                            r = Err(e.to_string());
                            break;
                        }
                    }
                }
                if r.is_ok() && manual != g.tokens {
                    r = Err(format!("greedy {:?} vs top-1 walk {:?}", g.tokens, manual));
                }
                r
            }
            Err(e) => Err(e.to_string()),
        }
    }));

    checks.push(outcome("hidden states shape and determinism", {
        let toks: Vec<TokenId> = if caption.is_empty() {
            vec![info.period_id]
        } else {
            caption.iter().copied().take(12).collect()
        };
        let mut r = Ok(());
        for with_image in [true, false] {
            let a = backend.final_hidden_states(&ctx, &toks, with_image);
            let b = backend.final_hidden_states(&ctx, &toks, with_image);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    if a.len() != toks.len() {
                        r = Err(format!("{} tokens in, {} vectors out", toks.len(), a.len()));
                    } else if a.iter().any(|v| v.len() != info.hidden_dim) {
                        r = Err("hidden dimension varies".into());
                    } else if a
                        .iter()
                        .flatten()
                        .zip(b.iter().flatten())
                        .any(|(x, y)| x.to_bits() != y.to_bits())
                    {
                        r = Err("repeated hidden-state call not bit-identical".into());
                    }
                }
                (Err(e), _) | (_, Err(e)) => r = Err(e.to_string()),
            }
        }
        r
    }));

    checks.push(outcome("discriminative reply parses", {
        let word = caption
            .iter()
            .map(|&t| info.token_text(t))
            .find(|w| w.chars().all(|c| c.is_ascii_alphabetic()) && w.len() > 2)
            .unwrap_or("dog")
            .to_string();
        backend
            .discriminative_query(image_ref, &word)
            .map(|_| ())
            .map_err(|e| e.to_string())
    }));

    ConformanceReport { checks }
}
