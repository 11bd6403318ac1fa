from .spd import solve_spd, pseudoinverse, inv_sqrt_spd, numerical_rank, spd_factor, spd_logdet
from .gsvd import gsvd_pair, GsvdFactors
from .woodbury import BlockDiagonalCovariance, CovarianceStructures

__all__ = [
    'solve_spd', 'pseudoinverse', 'inv_sqrt_spd', 'numerical_rank', 'spd_factor', 'spd_logdet',
    'gsvd_pair', 'GsvdFactors',
    'BlockDiagonalCovariance', 'CovarianceStructures',
]
