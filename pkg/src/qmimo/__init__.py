"""Quantized MIMO-OFDM detection toolkit.

Simulation and detection for receivers whose RF chains carry low-resolution
(or mixed-resolution) ADCs: the GEC-SR Bayes-optimal data detector with an
FFT fast path, LMMSE/GAMP baselines, the scalar state-evolution performance
predictor, and a seeded Monte Carlo experiment harness.
"""

from .baselines import gamp_detect, lmmse_detect
from .constellation import constellation_points, draw_symbols, hard_decision
from .detector import (DetectorDiagnostics, DetectorOptions, detect,
                       detect_batch, extrinsic, module_a_mixed,
                       module_a_quantized, module_a_unquantized, module_b,
                       module_c_exact, module_c_fast)
from .experiments import (ExperimentConfig, ResultRow, derive_seed,
                          interpolate_snr_at_ser, run_mc, run_se,
                          sweep_mixed_adc)
from .gaussian import (DegenerateIntervalError, QuadratureRule, big_phi,
                       gauss_hermite, gaussian_ratio, phi)
from .state_evolution import (SEState, SETrajectory, mse_qpsk, se_alpha,
                              se_run, se_step, ser_qpsk, ser_square_qam,
                              spectrum_expectation)
from .system import (ChannelOperator, ChannelRealization, ConfigError,
                     Quantizer, Spectrum, SystemConfig, apply_A,
                     apply_A_adjoint, draw_channel, load_channel,
                     make_quantizer, quantize, save_channel, spectrum,
                     thresholds, transmit)

__version__ = "0.1.0"
