"""cavlink: cooperative-perception feature links over impaired V2V channels.

Subsystems:
  feature_core     feature tensors, synthetic scenes, symbol mapping
  channel_models   Rician, non-stationary V2V CIR, TDL, disturbances
  link_layer       AWGN transmission, pilot LS estimation, zero forcing
  cond_diffusion   conditional diffusion schedules, forward/reverse, denoise
  noise_predictor  small conditional conv noise estimator with manual grads
  cav_weighting    CAV-level weighting model and the eco bypass gate
  fusion_proxy     mean / softmax-attention fusion and proxy-AP scoring
  harness          experiment orchestration, records, reports
"""

__version__ = "0.1.0"
