"""Multi-track symbolic music infilling workbench.

Subpackages:
    midi_io     standard MIDI file reading/writing and bar geometry
    tokenizer   event vocabulary, REMI-style encoding, trainable BPE
    prompt      bar-fill prompt assembly, attribute controls, datasets
    model       RWKV-7 network, parameters, checkpoints, LoRA
    training    pretraining and lightweight fine-tuning loops
    sampler     constrained autoregressive infill generation
    metrics     objective evaluation of infilled regions
    harness     synthetic corpora, experiments, CLI, HTTP service
"""

__version__ = "0.1.0"
