"""Amplification-trojan pipelines: a switchable input transformer trained to
amplify a fixed classifier's adversarial vulnerability, the concealable
attacks that exploit it, and the audit harness that measures both."""

__version__ = "0.1.0"
