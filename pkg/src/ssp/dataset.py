"""In-memory video records shared by training, inference and evaluation."""

from dataclasses import dataclass, field

import numpy as np

from ssp.synth import surrogate_features


@dataclass
class VideoData:
    """One video with whatever ground truth is available.

    ``labels`` maps frame index to an (H, W) int label map (sparse).
    ``homographies[k]``, ``flows_fwd[k]`` and ``flows_bwd[k]`` relate frames
    k and k+1: the homography maps frame-k pixels to frame k+1, ``flows_fwd``
    lives on frame k+1 and points into frame k, ``flows_bwd`` is the reverse.
    ``teacher[k]`` holds blended teacher logits (current=k, past=k-1).
    """

    name: str
    frames: list
    labels: dict = field(default_factory=dict)
    homographies: list = None
    flows_fwd: list = None
    flows_bwd: list = None
    class_names: list = field(default_factory=list)
    seed: int = 0
    logit_noise: float = 0.0
    teacher: dict = field(default_factory=dict)
    _features: list = field(default=None, repr=False)

    def __len__(self):
        return len(self.frames)

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def shape(self):
        return self.frames[0].shape[1:]

    def features(self):
        if self._features is None:
            self._features = [surrogate_features(f) for f in self.frames]
        return self._features

    def noise_seed(self, k):
        return [int(self.seed), 7, int(k)]

    @classmethod
    def from_sequence(cls, seq, name=None):
        labels = {k: lab for k, (lab, a) in enumerate(zip(seq.labels, seq.annotated)) if a}
        return cls(
            name=name or f"seq_{seq.config.seed:04d}",
            frames=seq.frames,
            labels=labels,
            homographies=[np.asarray(h) for h in seq.homographies],
            flows_fwd=seq.flows_fwd,
            flows_bwd=seq.flows_bwd,
            class_names=list(seq.class_names),
            seed=seq.config.seed,
            logit_noise=seq.config.logit_noise,
        )
