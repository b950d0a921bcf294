# 服务模块
