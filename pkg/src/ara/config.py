"""System configuration and the flat key-value config file format."""

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError


def dbm_to_mw(x_dbm):
    return 10.0 ** (x_dbm / 10.0)


@dataclass(frozen=True)
class SystemConfig:
    """Parameters of one simulated uplink random-access system.

    Defaults are the desk-scale benchmark profile; ``full_scale_profile``
    gives the large configuration used for headline numbers.
    """

    n_users: int = 100          # N, potential users
    n_active: int = 12          # K, simultaneously active users
    n_antennas: int = 8         # M, BS antennas
    pilot_len: int = 30         # base pilot length (symbols)
    max_delay: int = 2          # T, largest synchronization delay (symbols)
    tx_power: float = 23.0      # dBm
    noise_psd: float = -169.0   # dBm/Hz
    bandwidth: float = 1e6      # Hz
    cell_radius_min: float = 0.05  # km
    cell_radius_max: float = 1.0   # km
    max_iters: int = 50         # Q, receiver iteration cap
    tol: float = 1e-5           # relative-change stopping tolerance
    threshold: float = 0.5      # activity decision threshold on summed ratios
    seed: int = 1234            # 64-bit master seed
    bernoulli_activity: bool = False  # independent activation instead of fixed K
    fixed_distances: bool = False     # freeze user distances across trials

    def __post_init__(self):
        if self.n_users < 1 or self.pilot_len < 1 or self.n_antennas < 1:
            raise ConfigError("n_users, pilot_len and n_antennas must be positive")
        if not 0 <= self.n_active <= self.n_users:
            raise ConfigError(f"need 0 <= n_active <= n_users, got {self.n_active}/{self.n_users}")
        if self.max_delay < 0:
            raise ConfigError("max_delay must be >= 0")
        if self.tol <= 0:
            raise ConfigError("tol must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if not 0 < self.cell_radius_min <= self.cell_radius_max:
            raise ConfigError("need 0 < cell_radius_min <= cell_radius_max")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")

    # Derived quantities -------------------------------------------------

    @property
    def frame_len(self):
        """Received pilot window length L = pilot_len + max_delay."""
        return self.pilot_len + self.max_delay

    @property
    def expanded_dim(self):
        """Columns of the delay-expanded pilot matrix, (T+1)*N."""
        return (self.max_delay + 1) * self.n_users

    @property
    def aspect(self):
        """Row/column ratio of the expanded pilot matrix."""
        return self.frame_len / self.expanded_dim

    @property
    def tx_power_mw(self):
        return dbm_to_mw(self.tx_power)

    @property
    def noise_power_mw(self):
        """sigma^2 = PSD(linear mW/Hz) * bandwidth."""
        return dbm_to_mw(self.noise_psd) * self.bandwidth

    @property
    def noise_var_eff(self):
        """Per-entry variance of the normalized received-signal noise."""
        return self.noise_power_mw / (self.tx_power_mw * self.frame_len)

    @property
    def activity_rate(self):
        return self.n_active / self.n_users

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def full_scale_profile(base=None, **kw):
    """The large benchmark configuration (overridable via kw)."""
    base = base or SystemConfig()
    upd = dict(n_users=400, n_active=50, n_antennas=16, pilot_len=50, max_delay=4)
    upd.update(kw)
    return base.replace(**upd)


# Config file format: one `key = value` per line, keys are the
# SystemConfig field names, '#' starts a comment.

_FIELDS = {f.name: f.type for f in dataclasses.fields(SystemConfig)}


def _coerce(name, raw):
    typ = _FIELDS[name]
    raw = raw.strip()
    if typ == "bool" or typ is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean {name}={raw!r}")
    if typ == "int" or typ is int:
        return int(raw)
    return float(raw)


def parse_config_text(text):
    """Parse flat key-value text into a SystemConfig."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return SystemConfig(**values)


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def format_config(config):
    """Inverse of parse_config_text (used to echo configs into reports)."""
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in dataclasses.fields(SystemConfig)]
    return "\n".join(lines) + "\n"
