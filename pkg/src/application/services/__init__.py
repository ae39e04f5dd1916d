"""
Paquete de servicios de aplicación.
"""