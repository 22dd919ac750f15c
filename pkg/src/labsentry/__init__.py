"""Lab-stability clinical decision support at desk scale: scheduled
probabilistic predictions over FHIR-style patient data, rule-gated
order-entry alerts, encounter-randomized pilot simulation, and the
outcome/statistics pipeline."""

__version__ = "0.1.0"
