"""
Library knobs live on ``django.conf.settings`` under ``POLICY_SENSITIVITY_*``
names and are read with ``get_setting(NAME, default)``. A process that never
configured Django gets empty settings on first read, so every knob falls back
to its default.
"""
from django.conf import settings


def configure(**options):
    """
    Applies ``options`` to the Django settings, configuring them on first use.
    """
    if not settings.configured:
        settings.configure(**options)
        return
    for name, value in options.items():
        setattr(settings, name, value)


def get_setting(name, default):
    if not settings.configured:
        settings.configure()
    return getattr(settings, name, default)


def get_threads(n_jobs=None):
    """
    Resolves a worker count: an explicit value wins over the setting.
    """
    if n_jobs is None:
        n_jobs = get_setting("POLICY_SENSITIVITY_THREADS", 1)
    return max(1, int(n_jobs))


def get_probability_eps():
    return float(get_setting("POLICY_SENSITIVITY_PROBABILITY_EPS", 1e-6))
