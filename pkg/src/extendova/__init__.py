"""Camera-incremental person re-identification on synthetic streams.

A self-contained research lab for studying what happens when a
re-identification model must absorb new cameras one at a time, with only
within-camera labels, while some of the arriving identities were already
seen by earlier cameras.  Ships a small reverse-mode autodiff core, a
synthetic stream generator with controllable camera overlap, a prototype
memory bank with per-class seen/unseen detectors, the training recipes,
retrieval and identification metrics, and a command line front end.
"""

__version__ = "0.1.0"
