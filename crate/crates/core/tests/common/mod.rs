#![allow(dead_code)]

use recicl::ingest::{Interaction, Label};

pub fn ev(user: &str, item: &str, ts: i64, rating: f64) -> Interaction {
    Interaction {
        user_id: user.into(),
        item_id: item.into(),
        item_title: format!("Title {item}"),
        rating,
        timestamp: ts,
        label: Some(Label::from(rating > 4.0)),
    }
}

/// Events for one user, one per timestamp, alternating labels.
pub fn user_stream(user: &str, timestamps: &[i64]) -> Vec<Interaction> {
    timestamps
        .iter()
        .enumerate()
        .map(|(k, &ts)| ev(user, &format!("i{k}"), ts, if k % 2 == 0 { 5.0 } else { 2.0 }))
        .collect()
}
