# Simulation services: field solving through experiments
