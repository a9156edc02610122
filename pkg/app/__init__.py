# Churn lab
