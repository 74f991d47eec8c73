//! Campaign orchestration for the `humanizer` command-line tool.

pub mod campaign;
pub mod commands;
pub mod config;
pub mod selfcheck;
pub mod serve;
pub mod synth;

pub use campaign::{run_campaign, CampaignReport};
pub use config::CampaignConfig;
