//! Reusable layers: layer-normalised LSTMs, dropout, maxout, compact bilinear
//! pooling, embeddings and Xavier initialisation.

pub mod cbp;
pub mod checkpoint;
mod dropout;
mod init;
mod linear;
pub mod lstm;
mod maxout;

pub use cbp::{compact_bilinear, SketchParams};
pub use checkpoint::{read_checkpoint, write_checkpoint, load_checkpoint, save_checkpoint};
pub use dropout::{dropout_apply, dropout_tensor};
pub use init::{xavier_init, xavier_with, Init};
pub use linear::{Embedding, Linear};
pub use lstm::{blstm_run, Lstm, LstmConfig, LstmState};
pub use maxout::{maxout, Maxout};
