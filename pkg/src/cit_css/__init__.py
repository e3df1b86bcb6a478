"""Continual semantic segmentation with class-independent heads and
accumulative distillation, verified on a deterministic synthetic shapes
benchmark.

Subpackages:
    schedule    incremental task schedules, overlap/disjoint splits, relabeling
    synthdata   procedural shapes benchmark generator (bit-reproducible)
    model       conv feature extractor, class-independent query head, softmax
                baseline head, snapshots
    losses      supervised mask/presence losses, Bernoulli-KL distillation,
                loss routing, pseudo-label alternative
    pipeline    checkpoint registry, accumulative/iterative teacher targets,
                per-task training, end-to-end experiments
    evaluation  confusion matrices, IoU/mIoU, group metrics, forgetting curves
    cli         command-line front end
"""

__version__ = "0.1.0"
