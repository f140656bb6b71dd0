"""Desk-scale presentation attack detection toolkit.

Modules:
    diffcore   tiny reverse-mode autodiff over float64 numpy tensors
    dynimg     rank-pooled dynamic images from short frame windows
    netgraph   static/dynamic per-modality nets and partially shared fusion
    trainer    deterministic Adam training loop, augmentation, scoring
    metrics    APCER / BPCER / ACER, ROC, TPR at fixed FPR, aggregation
    protocols  manifest ingestion and the four benchmark split engines
    datasyn    synthetic multi-modal video corpus and raw clip container
    cli        end-to-end command line driver
"""

__version__ = "0.1.0"
