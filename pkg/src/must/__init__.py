"""Multimodal spatiotemporal graph-transformer for readmission prediction.

Modules:
    tensor, gradcheck   reverse-mode differentiation on numpy and its checker
    graph               admission similarity graph and GraphSAGE layer
    transformer         pre-norm transformer blocks, masks, CLS, positions
    modality            visit padding, note chunking and chunk embedders
    model               per-modality encoders, fusion transformer, head
    optim               cross-entropy, Adam and the training loop
    metrics             accuracy, AUC and DeLong intervals
    cohort              synthetic cohorts, splits and JSONL I/O
    gradsuite           finite-difference checks of every operation
    cli                 the ``must`` command
"""

__version__ = "0.1.0"
