//! Trial sets, the binary trial container, CSV import, session splits and a
//! synthetic motor-imagery generator.

mod container;
mod csv;
mod split;
mod synth;
mod trials;

pub use container::{decode_container, encode_container, read_container, write_container, MAGIC, VERSION};
pub use csv::{import_csv, LABELS_FILE};
pub use split::{split_sessions, SplitPolicy};
pub use synth::{generate_synthetic, SynthConfig};
pub use trials::TrialSet;
