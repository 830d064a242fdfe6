"""
Flow math, training, sampling, metrics and pipeline phases for the CAF desk.
"""
