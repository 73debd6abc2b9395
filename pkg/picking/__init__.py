"""
Simulated suction picking with learned pick refinement.
"""
