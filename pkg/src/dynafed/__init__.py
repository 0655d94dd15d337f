"""DynaFed federated-learning simulator."""
