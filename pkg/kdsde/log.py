import logging

app_logger = logging.getLogger('kdsde.app')
sde_logger = logging.getLogger('kdsde.sde')
transport_logger = logging.getLogger('kdsde.transport')
solver_logger = logging.getLogger('kdsde.solver')
diag_logger = logging.getLogger('kdsde.diag')
