#pragma once

#include <string>

#include "dvlm/errors.hpp"

namespace dvlm {

enum class Task { perception, prediction, planning, behavior };
enum class QType { multiple_choice, yes_no, open };

inline const char* to_string(Task t) {
    switch (t) {
        case Task::perception: return "perception";
        case Task::prediction: return "prediction";
        case Task::planning: return "planning";
        case Task::behavior: return "behavior";
    }
    return "?";
}

inline const char* to_string(QType q) {
    switch (q) {
        case QType::multiple_choice: return "multiple_choice";
        case QType::yes_no: return "yes_no";
        case QType::open: return "open";
    }
    return "?";
}

inline Task task_from_string(const std::string& s) {
    if (s == "perception") return Task::perception;
    if (s == "prediction") return Task::prediction;
    if (s == "planning") return Task::planning;
    if (s == "behavior") return Task::behavior;
    throw RoutingError("unknown task: " + s);
}

inline QType qtype_from_string(const std::string& s) {
    if (s == "multiple_choice") return QType::multiple_choice;
    if (s == "yes_no") return QType::yes_no;
    if (s == "open") return QType::open;
    throw RoutingError("unknown question type: " + s);
}

inline constexpr Task kAllTasks[] = {Task::perception, Task::prediction, Task::planning,
                                     Task::behavior};
inline constexpr QType kAllQTypes[] = {QType::multiple_choice, QType::yes_no, QType::open};

}  // namespace dvlm
