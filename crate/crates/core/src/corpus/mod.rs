//! Data model, session splitting, episodic sampling and exemplar replay.

mod dataset;
mod episode;
mod exemplar;
mod label;
mod session;
mod synthetic;

pub use dataset::{Dataset, EventClass, Instance};
pub use episode::{sample_episode, Episode};
pub use exemplar::{augment_session, select_exemplars, Exemplar, ExemplarStore};
pub use label::{label_space, ClassId, LabelSpace, Tag};
pub use session::{split_sessions, SessionPlan};
pub use synthetic::{generate_synthetic, trigger_lexemes, SyntheticConfig};
