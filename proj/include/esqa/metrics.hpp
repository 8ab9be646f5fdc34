#pragma once

#include <string>
#include <vector>

namespace esqa {

double accuracy(const std::vector<std::string>& preds, const std::vector<std::string>& truths);

// 2TP / (2TP + FP + FN) with label 1 positive; 0 when TP = FP = FN = 0.
double f1_binary(const std::vector<int>& preds, const std::vector<int>& truths);

// Unweighted mean of one-vs-rest F1 over labels seen in either list.
// Predictions equal to `ignore` count as misses but do not form a class.
double f1_macro(const std::vector<std::string>& preds, const std::vector<std::string>& truths,
                const std::string& ignore = "");

double mae(const std::vector<double>& preds, const std::vector<double>& truths);
double mse(const std::vector<double>& preds, const std::vector<double>& truths);

// Probability a random positive outscores a random negative, ties 0.5.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

double mean_of(const std::vector<double>& xs);
double median_of(std::vector<double> xs);

}  // namespace esqa
