"""Implicit preference alignment for rectified-flow models, at desk scale.

Modules:

* :mod:`ipalab.flowcore` - velocity-field MLP with low-rank adapters, flow
  matching loss, Euler sampler, checkpoints.
* :mod:`ipalab.objectives` - IPA, HALO weighting and the baseline objectives.
* :mod:`ipalab.oracles` - closed-form Gaussian flows, gradient checks, dip test.
* :mod:`ipalab.dataworld` - synthetic body+hand domain, corruption, curation.
* :mod:`ipalab.trainlab` - training, telemetry, metrics, sweeps.
* :mod:`ipalab.cli` - command-line front end.
"""

__version__ = "0.1.0"
