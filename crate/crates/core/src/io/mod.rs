//! Files: WAV audio, checkpoints and datasets.

mod checkpoint;
mod dataset;
mod wav;

pub use checkpoint::{
    apply_to_model, inspect, load_model, load_model_file, save_model, Checkpoint, ManifestEntry, MAGIC, VERSION,
};
pub use dataset::{load_wav_dir, synth_clip, synth_dataset, Dataset, NOISE_FLOOR_DB, PEAK_LIMIT};
pub use wav::{encode_wav, parse_wav, quantize_sample, wav_read, wav_write, WavInfo};
