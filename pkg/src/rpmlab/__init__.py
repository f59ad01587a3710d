"""rpmlab: procedurally generated Raven-style matrices and two from-scratch CNN solvers.

Submodules
----------
domain, rules, generator
    Symbolic problems, rule application and checking, seeded generation.
raster, dataset
    Rendering to grayscale panels and the binary ``RPMD`` pack format.
autodiff, nn
    A numpy reverse-mode tape, the CNN, Adam and ``RPMC`` checkpoints.
solvers, harness, cli
    Supervised and pseudo-target training, experiment protocols, command line.
"""

__version__ = "0.1.0"
