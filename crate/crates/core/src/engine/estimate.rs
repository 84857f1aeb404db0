//! Token, time-remaining and cost estimates.

use serde::{Deserialize, Serialize};

/// Rough token count: a quarter of the characters sent plus a quarter of
/// the characters received, each rounded down.
pub fn estimate_tokens(input_chars: usize, output_chars: usize) -> u64 {
    (input_chars / 4 + output_chars / 4) as u64
}

/// Seconds remaining at the observed rate; `None` before the first record.
pub fn estimate_eta(elapsed_seconds: f64, processed: usize, total: usize) -> Option<f64> {
    if processed == 0 {
        return None;
    }
    let remaining = total.saturating_sub(processed) as f64;
    Some(remaining * elapsed_seconds / processed as f64)
}

/// Cost of a batch given per-million-token prices.
pub fn estimate_cost(
    n_records: u64,
    avg_input_tokens: f64,
    avg_output_tokens: f64,
    price_in_per_million: f64,
    price_out_per_million: f64,
) -> f64 {
    n_records as f64
        * (avg_input_tokens * price_in_per_million + avg_output_tokens * price_out_per_million)
        / 1e6
}

/// Unit prices of one model, in currency per million tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub provider: String,
    pub model: String,
    pub input_per_million: f64,
    pub output_per_million: f64,
}

/// A configurable list of model prices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    pub prices: Vec<ModelPrice>,
}

impl PriceTable {
    /// USD list prices (May 2026) for the default models.
    pub fn builtin() -> Self {
        let p = |provider: &str, model: &str, input, output| ModelPrice {
            provider: provider.into(),
            model: model.into(),
            input_per_million: input,
            output_per_million: output,
        };
        Self {
            prices: vec![
                p("deepseek", "deepseek-v4-flash", 0.14, 0.20),
                p("deepseek", "deepseek-v4-pro", 0.55, 0.72),
                p("qwen", "qwen-turbo", 0.27, 0.34),
                p("qwen", "qwen-max", 1.365, 1.36),
                p("zhipu", "glm-4-flash", 0.0, 0.0),
            ],
        }
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }

    pub fn lookup(&self, model: &str) -> Option<&ModelPrice> {
        self.prices.iter().find(|p| p.model.eq_ignore_ascii_case(model))
    }

    /// Cost of `n_records` records for `model`; `None` for unpriced models.
    pub fn cost(&self, model: &str, n_records: u64, avg_input_tokens: f64, avg_output_tokens: f64) -> Option<f64> {
        self.lookup(model).map(|p| {
            estimate_cost(
                n_records,
                avg_input_tokens,
                avg_output_tokens,
                p.input_per_million,
                p.output_per_million,
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens() {
        assert_eq!(estimate_tokens(2000, 500), 625);
        assert_eq!(estimate_tokens(0, 0), 0);
        assert_eq!(estimate_tokens(7, 6), 2);
        assert_eq!(estimate_tokens(3, 3), 0);
    }

    #[test]
    fn eta() {
        assert_eq!(estimate_eta(100.0, 50, 100), Some(100.0));
        assert_eq!(estimate_eta(0.0, 0, 100), None);
        assert_eq!(estimate_eta(30.0, 10, 500), Some(1470.0));
        assert_eq!(estimate_eta(5.0, 10, 10), Some(0.0));
    }

    #[test]
    fn cost() {
        assert!((estimate_cost(1000, 2000.0, 500.0, 0.14, 0.20) - 0.38).abs() < 1e-9);
        assert_eq!(estimate_cost(0, 2000.0, 500.0, 0.14, 0.20), 0.0);
        assert_eq!(estimate_cost(1000, 2000.0, 500.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn price_table_lookup() {
        let t = PriceTable::builtin();
        let c = t.cost("qwen-turbo", 1000, 2000.0, 500.0).unwrap();
        assert!((c - 0.71).abs() < 1e-9);
        assert!(t.cost("unknown", 1, 1.0, 1.0).is_none());
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(PriceTable::from_json(&json).unwrap(), t);
    }
}
