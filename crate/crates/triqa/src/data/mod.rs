//! Dataset schema, tensor file format, synthetic corpus generation, and
//! checkpoint persistence.

mod checkpoint;
mod dataset;
mod synth;
mod tensor_file;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dataset::{load_dataset, load_vocab, LoadOptions, MissingAudioPolicy, QAItem, Vocab, PAD, UNK};
pub use synth::{
    class_tone_freq, generate_synthetic, generate_weak_corpus, segment_mean_features,
    DecidingModality, SynthOutput, SyntheticSpec, ToneCoding,
};
pub use tensor_file::{decode_tensor, encode_tensor, read_tensor_file, write_tensor_file};
